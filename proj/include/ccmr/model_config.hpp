#pragma once

#include <array>
#include <string>

#include <nlohmann/json_fwd.hpp>

namespace ccmr {

/// Architecture hyper-parameters. Defaults are the full-size model; see
/// `ModelConfig::toy()` for the desk-scale configuration used in tests.
struct ModelConfig {
  int num_scales = 4;           // 3: 1/16..1/4, 4: 1/16..1/2
  int feature_dim = 256;        // matching features per scale
  int hidden_dim = 128;         // GRU state, tanh split of the context map
  int context_dim = 128;        // relu split of the context map, attention width
  int motion_dim = 128;         // motion features
  int heads = 8;
  int ffn_expansion = 4;
  int corr_radius = 4;
  // Encoder stage widths at 1/2, 1/4, 1/8, 1/16.
  std::array<int, 4> encoder_widths{64, 96, 128, 160};
  int blocks_per_stage = 2;
  // Residual width of the image-feature consolidation unit; the context
  // encoder uses half of it.
  int consolidation_width = 256;
  int head_width = 128;         // flow / mask head hidden width
  int motion_corr_width = 256;  // motion encoder, cost branch (1x1 width)
  int motion_flow_width = 128;  // motion encoder, flow branch (7x7 width)
  double layer_scale_init = 1.0;
  bool detach_flow = true;

  int context_width() const { return hidden_dim + context_dim; }
  int corr_channels() const { return (2 * corr_radius + 1) * (2 * corr_radius + 1); }
  // Downsampling factor of scale index s in [0, num_scales), coarse to fine.
  int scale_factor(int s) const { return 16 >> s; }

  /// Throws ConfigError on inconsistent settings.
  void validate() const;

  static ModelConfig toy();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace ccmr
