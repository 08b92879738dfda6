#include "ccmr/features.hpp"

#include <algorithm>

namespace ccmr {

template <typename Scalar>
ResidualBlock<Scalar>::ResidualBlock(ParameterSet<Scalar>& params, const std::string& name, int in_channels,
                                     int out_channels, int stride, Rng& rng)
    : conv1_(params, name + ".conv1", in_channels, out_channels, 3, stride, rng, kReluGain),
      conv2_(params, name + ".conv2", out_channels, out_channels, 3, 1, rng, kReluGain) {
  if (stride != 1 || in_channels != out_channels) {
    skip_ = Conv2d<Scalar>(params, name + ".skip", in_channels, out_channels, 1, stride, rng);
    has_skip_ = true;
  }
}

template <typename Scalar>
Var<Scalar> ResidualBlock<Scalar>::operator()(const Var<Scalar>& x) const {
  Var<Scalar> y = relu(conv2_(relu(conv1_(x))));
  return relu((has_skip_ ? skip_(x) : x) + y);
}

template <typename Scalar>
ConsolidationUnit<Scalar>::ConsolidationUnit(ParameterSet<Scalar>& params, const std::string& name,
                                             int coarse_channels, int fine_channels, int residual_width,
                                             int out_channels, Rng& rng)
    : res1_(params, name + ".res1", coarse_channels + fine_channels, residual_width, 1, rng),
      res2_(params, name + ".res2", residual_width, residual_width, 1, rng),
      out_(params, name + ".out", residual_width, out_channels, 3, 1, rng) {}

template <typename Scalar>
Var<Scalar> ConsolidationUnit<Scalar>::operator()(const Var<Scalar>& coarse, const Var<Scalar>& fine_intermediate) const {
  if (coarse.height() * 2 != fine_intermediate.height() || coarse.width() * 2 != fine_intermediate.width()) {
    throw ShapeError("consolidate: coarse " + coarse.value().shape_string() + " is not half of fine " +
                     fine_intermediate.value().shape_string());
  }
  Var<Scalar> stacked = concat_channels<Scalar>({upsample_bilinear(coarse, 2), fine_intermediate});
  return out_(res2_(res1_(stacked)));
}

template <typename Scalar>
PyramidEncoder<Scalar>::PyramidEncoder(ParameterSet<Scalar>& params, const std::string& name,
                                       const ModelConfig& config, int out_channels, int residual_width, Rng& rng)
    : num_scales_(config.num_scales) {
  const auto& w = config.encoder_widths;
  stem_ = Conv2d<Scalar>(params, name + ".stem", 3, w[0], 3, 2, rng, kReluGain);
  stages_.resize(4);
  for (int stage = 0; stage < 4; ++stage) {
    for (int b = 0; b < config.blocks_per_stage; ++b) {
      const int in = (b == 0 && stage > 0) ? w[stage - 1] : w[stage];
      const int stride = (b == 0 && stage > 0) ? 2 : 1;
      stages_[stage].emplace_back(params, name + ".stage" + std::to_string(stage) + ".block" + std::to_string(b), in,
                                  w[stage], stride, rng);
    }
  }
  coarse_head_ = Conv2d<Scalar>(params, name + ".coarse_head", w[3], out_channels, 3, 1, rng);
  // Scale s (1-based, coarse to fine) consumes the intermediate at stage 3 - s.
  for (int s = 1; s < num_scales_; ++s) {
    consolidations_.emplace_back(params, name + ".consolidate" + std::to_string(s), out_channels, w[3 - s],
                                 residual_width, out_channels, rng);
  }
}

template <typename Scalar>
std::vector<Var<Scalar>> PyramidEncoder<Scalar>::intermediates(const Var<Scalar>& image) const {
  std::vector<Var<Scalar>> fine_to_coarse;
  Var<Scalar> x = relu(stem_(image));
  for (const auto& stage : stages_) {
    for (const auto& block : stage) x = block(x);
    fine_to_coarse.push_back(x);
  }
  std::reverse(fine_to_coarse.begin(), fine_to_coarse.end());
  return fine_to_coarse;
}

template <typename Scalar>
std::vector<Var<Scalar>> PyramidEncoder<Scalar>::operator()(const Var<Scalar>& image) const {
  validate_image(image.value());
  const auto inter = intermediates(image);
  std::vector<Var<Scalar>> out;
  out.push_back(coarse_head_(inter[0]));
  for (int s = 1; s < num_scales_; ++s) out.push_back(consolidations_[s - 1](out.back(), inter[s]));
  return out;
}

template <typename Scalar>
void validate_image(const Tensor<Scalar>& image) {
  if (image.channels() != 3) throw ShapeError("image must have 3 channels, got " + image.shape_string());
  const int pad_bottom = (16 - image.height() % 16) % 16;
  const int pad_right = (16 - image.width() % 16) % 16;
  if (pad_bottom || pad_right || image.height() == 0 || image.width() == 0) {
    throw PaddingError(image.height(), image.width(), pad_bottom, pad_right);
  }
  if (!image.mat().allFinite()) throw ShapeError("image contains non-finite values");
}

template <typename Scalar>
Var<Scalar> consolidate(const Var<Scalar>& coarse, const Var<Scalar>& fine_intermediate,
                        const ConsolidationUnit<Scalar>& unit) {
  return unit(coarse, fine_intermediate);
}

template <typename Scalar>
FeaturePyramid<Scalar> extract_image_features(const Var<Scalar>& image, const PyramidEncoder<Scalar>& encoder) {
  return {encoder(image)};
}

template <typename Scalar>
ContextLevel<Scalar> split_context(const Var<Scalar>& consolidated, int hidden_dim) {
  const int rest = consolidated.channels() - hidden_dim;
  if (hidden_dim <= 0 || rest <= 0) throw ShapeError("split_context: cannot split " + std::to_string(consolidated.channels()));
  return {relu(slice_channels(consolidated, hidden_dim, rest)), tanh(slice_channels(consolidated, 0, hidden_dim))};
}

template <typename Scalar>
ContextPyramid<Scalar> extract_context(const Var<Scalar>& image, const PyramidEncoder<Scalar>& encoder, int hidden_dim) {
  ContextPyramid<Scalar> pyramid;
  for (const auto& level : encoder(image)) pyramid.levels.push_back(split_context(level, hidden_dim));
  return pyramid;
}

template <typename Scalar>
Tensor<Scalar> pad_to_multiple(const Tensor<Scalar>& image, int multiple, Padding* padding) {
  const int h = image.height(), w = image.width();
  const int ph = (multiple - h % multiple) % multiple;
  const int pw = (multiple - w % multiple) % multiple;
  if (padding) *padding = {ph, pw};
  Tensor<Scalar> out(image.channels(), h + ph, w + pw);
  for (int y = 0; y < h + ph; ++y) {
    for (int x = 0; x < w + pw; ++x) {
      out.mat().col(y * (w + pw) + x) = image.mat().col(std::min(y, h - 1) * w + std::min(x, w - 1));
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& x, int height, int width) {
  if (height > x.height() || width > x.width()) throw ShapeError("crop larger than tensor");
  Tensor<Scalar> out(x.channels(), height, width);
  for (int y = 0; y < height; ++y) {
    for (int c = 0; c < width; ++c) out.mat().col(y * width + c) = x.mat().col(y * x.width() + c);
  }
  return out;
}

#define CCMR_INSTANTIATE_FEATURES(S)                                                                       \
  template class ResidualBlock<S>;                                                                         \
  template class ConsolidationUnit<S>;                                                                     \
  template class PyramidEncoder<S>;                                                                        \
  template void validate_image(const Tensor<S>&);                                                          \
  template Var<S> consolidate(const Var<S>&, const Var<S>&, const ConsolidationUnit<S>&);                  \
  template FeaturePyramid<S> extract_image_features(const Var<S>&, const PyramidEncoder<S>&);              \
  template ContextLevel<S> split_context(const Var<S>&, int);                                              \
  template ContextPyramid<S> extract_context(const Var<S>&, const PyramidEncoder<S>&, int);                \
  template Tensor<S> pad_to_multiple(const Tensor<S>&, int, Padding*);                                     \
  template Tensor<S> crop(const Tensor<S>&, int, int);

CCMR_INSTANTIATE_FEATURES(float)
CCMR_INSTANTIATE_FEATURES(double)

}  // namespace ccmr
