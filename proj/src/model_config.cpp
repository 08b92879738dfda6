#include "ccmr/model_config.hpp"

#include <nlohmann/json.hpp>

#include "ccmr/errors.hpp"

namespace ccmr {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (num_scales != 3 && num_scales != 4) fail("num_scales must be 3 or 4");
  if (feature_dim < 1 || hidden_dim < 1 || context_dim < 1) fail("channel widths must be positive");
  if (motion_dim < 3) fail("motion_dim must be >= 3 (flow is appended)");
  if (heads < 1 || context_dim % heads != 0) fail("context_dim must be divisible by heads");
  if (context_dim % 2 != 0) fail("context_dim must be even (positional embedding)");
  if (motion_dim % 2 != 0) fail("motion_dim must be even");
  if (ffn_expansion < 1) fail("ffn_expansion must be >= 1");
  if (corr_radius < 1) fail("corr_radius must be >= 1");
  for (int w : encoder_widths) {
    if (w < 1) fail("encoder widths must be positive");
  }
  if (blocks_per_stage < 1) fail("blocks_per_stage must be >= 1");
  if (consolidation_width < 2 || head_width < 1 || motion_corr_width < 2 || motion_flow_width < 2) {
    fail("hidden widths too small");
  }
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.num_scales = 3;
  c.feature_dim = 32;
  c.hidden_dim = 32;
  c.context_dim = 16;
  c.motion_dim = 32;
  c.heads = 4;
  c.ffn_expansion = 2;
  c.corr_radius = 4;
  c.encoder_widths = {16, 24, 32, 48};
  c.blocks_per_stage = 1;
  c.consolidation_width = 32;
  c.head_width = 32;
  c.motion_corr_width = 48;
  c.motion_flow_width = 16;
  c.layer_scale_init = 0.1;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_scales", c.num_scales},
                     {"feature_dim", c.feature_dim},
                     {"hidden_dim", c.hidden_dim},
                     {"context_dim", c.context_dim},
                     {"motion_dim", c.motion_dim},
                     {"heads", c.heads},
                     {"ffn_expansion", c.ffn_expansion},
                     {"corr_radius", c.corr_radius},
                     {"encoder_widths", c.encoder_widths},
                     {"blocks_per_stage", c.blocks_per_stage},
                     {"consolidation_width", c.consolidation_width},
                     {"head_width", c.head_width},
                     {"motion_corr_width", c.motion_corr_width},
                     {"motion_flow_width", c.motion_flow_width},
                     {"layer_scale_init", c.layer_scale_init},
                     {"detach_flow", c.detach_flow}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.is_string()) {  // "toy" is shorthand for {"preset": "toy"}
    from_json(nlohmann::json{{"preset", j}}, c);
    return;
  }
  if (!j.is_object()) throw ConfigError("model config: expected an object or a preset name");
  // Missing keys keep their current value so partial configs overlay a base.
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  static const char* known[] = {"num_scales",  "feature_dim",      "hidden_dim",     "context_dim",
                                "motion_dim",  "heads",            "ffn_expansion",  "corr_radius",
                                "encoder_widths", "blocks_per_stage", "consolidation_width", "head_width",
                                "motion_corr_width", "motion_flow_width", "layer_scale_init", "detach_flow", "preset"};
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("model config: unknown key '" + key + "'");
  }
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "toy") {
      c = ModelConfig::toy();
    } else if (preset == "full") {
      c = ModelConfig{};
    } else {
      throw ConfigError("model config: unknown preset '" + preset + "' (toy, full)");
    }
  }
  get("num_scales", c.num_scales);
  get("feature_dim", c.feature_dim);
  get("hidden_dim", c.hidden_dim);
  get("context_dim", c.context_dim);
  get("motion_dim", c.motion_dim);
  get("heads", c.heads);
  get("ffn_expansion", c.ffn_expansion);
  get("corr_radius", c.corr_radius);
  get("encoder_widths", c.encoder_widths);
  get("blocks_per_stage", c.blocks_per_stage);
  get("consolidation_width", c.consolidation_width);
  get("head_width", c.head_width);
  get("motion_corr_width", c.motion_corr_width);
  get("motion_flow_width", c.motion_flow_width);
  get("layer_scale_init", c.layer_scale_init);
  get("detach_flow", c.detach_flow);
}

}  // namespace ccmr
