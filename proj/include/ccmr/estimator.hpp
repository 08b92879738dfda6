#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ccmr/attention.hpp"
#include "ccmr/features.hpp"
#include "ccmr/model_config.hpp"

namespace ccmr {

/// On-demand local cost lookup. For each pixel x and integer offset
/// d in [-r, r]^2 (channel (dy + r) * (2r + 1) + (dx + r)):
///   cost(x, d) = <F1(x), F2(x + flow(x) + d)> / sqrt(C)
/// with bilinear sampling of F2; samples outside the map read zero features.
/// Differentiable in F1, F2 and flow.
template <typename Scalar>
Var<Scalar> corr_lookup(const Var<Scalar>& features1, const Var<Scalar>& features2, const Var<Scalar>& flow,
                        int radius);

/// Convex x2 upsampling. `mask` carries 36 logits per coarse pixel, channel
/// k * 4 + (sy * 2 + sx) for neighbour k = ky * 3 + kx of the 3x3 window
/// (borders clamp). Each fine value is 2 * the softmax-weighted neighbourhood.
template <typename Scalar>
Var<Scalar> convex_upsample_x2(const Var<Scalar>& flow, const Var<Scalar>& mask);

template <typename Scalar>
class MotionEncoder {
 public:
  MotionEncoder() = default;
  MotionEncoder(ParameterSet<Scalar>& params, const std::string& name, const ModelConfig& config, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& costs, const Var<Scalar>& flow) const;

 private:
  Conv2d<Scalar> corr1_, corr2_, flow1_, flow2_, fuse_;
};

template <typename Scalar>
Var<Scalar> encode_motion(const MotionEncoder<Scalar>& encoder, const Var<Scalar>& costs, const Var<Scalar>& flow) {
  return encoder(costs, flow);
}

template <typename Scalar>
struct GruOutput {
  Var<Scalar> hidden;
  Var<Scalar> delta_flow;
  Var<Scalar> mask;
  std::vector<Var<Scalar>> gates;  // z, r of the horizontal then vertical pass
};

/// Separable conv-GRU (1x5 then 5x1) with flow and upsampling-mask heads.
/// One instance is shared by every scale.
template <typename Scalar>
class UpdateBlock {
 public:
  UpdateBlock() = default;
  UpdateBlock(ParameterSet<Scalar>& params, const std::string& name, const ModelConfig& config, Rng& rng);

  GruOutput<Scalar> operator()(const Var<Scalar>& hidden, const Var<Scalar>& inputs) const;
  Var<Scalar> mask_head(const Var<Scalar>& hidden) const;

  int input_channels() const { return input_channels_; }

 private:
  int input_channels_ = 0;
  Conv2d<Scalar> z1_, r1_, q1_, z2_, r2_, q2_;
  Conv2d<Scalar> flow1_, flow2_;
  Conv2d<Scalar> mask1_, mask2_;
};

/// Stacks [CMF, C_s, MF] and runs the shared update block.
template <typename Scalar>
GruOutput<Scalar> gru_update(const UpdateBlock<Scalar>& block, const Var<Scalar>& hidden,
                             const Var<Scalar>& grouped_motion, const Var<Scalar>& context, const Var<Scalar>& motion);

/// Per-scale GRU iteration counts, coarse to fine.
class IterationSchedule {
 public:
  explicit IterationSchedule(std::vector<int> iterations);

  /// "train" / "sintel" / "kitti" for 3 or 4 scales.
  static IterationSchedule preset(const std::string& name, int num_scales);
  /// Comma separated counts, e.g. "4,5,5,6".
  static IterationSchedule parse(const std::string& text);

  int num_scales() const { return static_cast<int>(iterations_.size()); }
  int operator[](int s) const { return iterations_.at(s); }
  int total() const;
  const std::vector<int>& iterations() const { return iterations_; }
  std::string to_string() const;

 private:
  std::vector<int> iterations_;
};

/// All trainable state. Per-scale attention parameters; a single motion
/// encoder and update block (GRU, flow head, mask head) for all scales.
template <typename Scalar>
class CcmrModel {
 public:
  CcmrModel(const ModelConfig& config, std::uint64_t seed);

  CcmrModel(const CcmrModel&) = delete;
  CcmrModel& operator=(const CcmrModel&) = delete;
  CcmrModel(CcmrModel&&) = default;
  CcmrModel& operator=(CcmrModel&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }

  PyramidEncoder<Scalar> image_encoder;
  PyramidEncoder<Scalar> context_encoder;
  std::vector<XcitBlockParams<Scalar>> global_context;
  std::vector<XcitBlockParams<Scalar>> motion_grouping;
  MotionEncoder<Scalar> motion_encoder;
  UpdateBlock<Scalar> update_block;

 private:
  ModelConfig config_;
  ParameterSet<Scalar> params_;
};

/// Which parameter objects served one GRU invocation.
struct StepTrace {
  int scale = 0;
  const void* motion_encoder = nullptr;
  const void* update_block = nullptr;
  const void* global_context = nullptr;
  const void* motion_grouping = nullptr;
};

template <typename Scalar>
struct FlowEstimate {
  Var<Scalar> flow;                      // full resolution
  std::vector<Var<Scalar>> predictions;  // per (scale, iteration), full resolution
  std::vector<Var<Scalar>> scale_inits;  // initial flow of each scale, at that scale
  std::vector<Var<Scalar>> scale_finals; // last flow of each scale, at that scale
  std::vector<Var<Scalar>> scale_masks;  // last upsampling mask of each scale
  std::vector<StepTrace> trace;
  int gru_invocations = 0;
};

template <typename Scalar>
struct ContextOutputs {
  ContextPyramid<Scalar> context;
  std::vector<Var<Scalar>> global_context;
};

/// Context pyramid of the reference frame plus GC_s at every scale.
template <typename Scalar>
ContextOutputs<Scalar> compute_context(const CcmrModel<Scalar>& model, const Var<Scalar>& image1);

/// Coarse-to-fine estimation. Images must already be padded to multiples of 16.
template <typename Scalar>
FlowEstimate<Scalar> estimate_flow(const CcmrModel<Scalar>& model, const Var<Scalar>& image1, const Var<Scalar>& image2,
                                   const IterationSchedule& schedule);

}  // namespace ccmr
