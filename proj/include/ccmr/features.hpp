#pragma once

#include <vector>

#include "ccmr/model_config.hpp"
#include "ccmr/nn.hpp"

namespace ccmr {

/// Matching features for one frame, coarse (1/16) to fine.
template <typename Scalar>
struct FeaturePyramid {
  std::vector<Var<Scalar>> levels;

  int num_scales() const { return static_cast<int>(levels.size()); }
  const Var<Scalar>& operator[](int s) const { return levels[s]; }
};

/// Per-scale context split: `context` = relu part (C_s), `hidden` = tanh part (H_s).
template <typename Scalar>
struct ContextLevel {
  Var<Scalar> context;
  Var<Scalar> hidden;
};

template <typename Scalar>
struct ContextPyramid {
  std::vector<ContextLevel<Scalar>> levels;

  int num_scales() const { return static_cast<int>(levels.size()); }
  const ContextLevel<Scalar>& operator[](int s) const { return levels[s]; }
};

template <typename Scalar>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(ParameterSet<Scalar>& params, const std::string& name, int in_channels, int out_channels, int stride,
                Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const;

 private:
  Conv2d<Scalar> conv1_, conv2_;
  Conv2d<Scalar> skip_;
  bool has_skip_ = false;
};

/// Upsample the coarser map x2, stack with the finer intermediate, aggregate
/// with two residual blocks and finish with an activation-free convolution.
template <typename Scalar>
class ConsolidationUnit {
 public:
  ConsolidationUnit() = default;
  ConsolidationUnit(ParameterSet<Scalar>& params, const std::string& name, int coarse_channels, int fine_channels,
                    int residual_width, int out_channels, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& coarse, const Var<Scalar>& fine_intermediate) const;

  int out_channels() const { return out_.out_channels(); }

 private:
  ResidualBlock<Scalar> res1_, res2_;
  Conv2d<Scalar> out_;
};

/// U-Net-style encoder: strided residual stages produce intermediates at
/// 1/2..1/16, the coarsest output comes from a plain conv and finer outputs
/// from per-scale consolidation units.
template <typename Scalar>
class PyramidEncoder {
 public:
  PyramidEncoder() = default;
  PyramidEncoder(ParameterSet<Scalar>& params, const std::string& name, const ModelConfig& config, int out_channels,
                 int residual_width, Rng& rng);

  /// Outputs coarse to fine, `num_scales` of them.
  std::vector<Var<Scalar>> operator()(const Var<Scalar>& image) const;

  /// Top-down intermediates at 1/16, 1/8, 1/4, 1/2.
  std::vector<Var<Scalar>> intermediates(const Var<Scalar>& image) const;

  const ConsolidationUnit<Scalar>& consolidation(int s) const { return consolidations_.at(s - 1); }

 private:
  int num_scales_ = 0;
  Conv2d<Scalar> stem_;
  std::vector<std::vector<ResidualBlock<Scalar>>> stages_;
  Conv2d<Scalar> coarse_head_;
  std::vector<ConsolidationUnit<Scalar>> consolidations_;
};

/// Throws PaddingError unless height and width are multiples of 16, and
/// ShapeError for non-RGB or non-finite input.
template <typename Scalar>
void validate_image(const Tensor<Scalar>& image);

/// Free-function form of the consolidation step.
template <typename Scalar>
Var<Scalar> consolidate(const Var<Scalar>& coarse, const Var<Scalar>& fine_intermediate,
                        const ConsolidationUnit<Scalar>& unit);

template <typename Scalar>
FeaturePyramid<Scalar> extract_image_features(const Var<Scalar>& image, const PyramidEncoder<Scalar>& encoder);

/// Splits a consolidated context map into tanh(first hidden_dim) and
/// relu(remaining context_dim) channels.
template <typename Scalar>
ContextLevel<Scalar> split_context(const Var<Scalar>& consolidated, int hidden_dim);

template <typename Scalar>
ContextPyramid<Scalar> extract_context(const Var<Scalar>& image, const PyramidEncoder<Scalar>& encoder, int hidden_dim);

struct Padding {
  int bottom = 0;
  int right = 0;
};

/// Replicate-pads bottom/right to the next multiple of `multiple`.
template <typename Scalar>
Tensor<Scalar> pad_to_multiple(const Tensor<Scalar>& image, int multiple, Padding* padding = nullptr);

template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& x, int height, int width);

}  // namespace ccmr
