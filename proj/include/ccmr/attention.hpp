#pragma once

#include <string>
#include <vector>

#include "ccmr/nn.hpp"

namespace ccmr {

/// Sinusoidal 2-D embedding, channels x height x width. The first half of the
/// channels encodes the row, the second half the column; within each half,
/// channel k uses frequency 10000^(-2*floor(k/2)/half) with sin for even k
/// and cos for odd k. Throws ConfigError for odd channel counts.
template <typename Scalar>
Tensor<Scalar> sinusoidal_embedding(int channels, int height, int width);

/// x + embedding(x's shape).
template <typename Scalar>
Var<Scalar> positional_embed(const Var<Scalar>& x);

template <typename Scalar>
struct KeyQueryValue {
  Var<Scalar> key;
  Var<Scalar> query;
  Var<Scalar> value;
};

/// Linear projections of the (normalized) token map. Heads are contiguous
/// channel blocks of width d/h; see `head_block`.
template <typename Scalar>
KeyQueryValue<Scalar> kqv_project(const Var<Scalar>& x_norm, const Conv2d<Scalar>& key, const Conv2d<Scalar>& query,
                                  const Conv2d<Scalar>& value, int heads);

/// Tokens x (d/h) view of head `head` of a d-channel map.
template <typename Scalar>
MatrixX<Scalar> head_block(const Tensor<Scalar>& x, int head, int heads);

inline constexpr double kXcaNormFloor = 1e-6;

template <typename Scalar>
struct XcaForward {
  Tensor<Scalar> output;
  // One (d/h) x (d/h) column-stochastic matrix per head.
  std::vector<MatrixX<Scalar>> attention;
};

/// Cross-covariance attention on raw tensors. Per head, keys and queries are
/// L2-normalized along the token axis, logits = K^T Q / tau are softmaxed
/// over the key-channel axis, and the output is V * A.
template <typename Scalar>
XcaForward<Scalar> xca_forward(const Tensor<Scalar>& key, const Tensor<Scalar>& query, const Tensor<Scalar>& value,
                               const VectorX<Scalar>& temperature, int heads);

/// Differentiable XCA; `log_temperature` is heads x 1 x 1 and tau = exp(.).
template <typename Scalar>
Var<Scalar> xca(const Var<Scalar>& key, const Var<Scalar>& query, const Var<Scalar>& value,
                const Var<Scalar>& log_temperature, int heads);

template <typename Scalar>
struct LpiParams {
  Var<Scalar> dw1_weight, dw1_bias;
  Var<Scalar> norm_gain, norm_shift;
  Var<Scalar> dw2_weight, dw2_bias;

  static LpiParams make(ParameterSet<Scalar>& params, const std::string& name, int channels, Rng& rng);
};

/// Depth-wise 3x3 -> GELU -> per-channel affine -> depth-wise 3x3.
template <typename Scalar>
Var<Scalar> lpi(const Var<Scalar>& x, const LpiParams<Scalar>& p);

template <typename Scalar>
struct FfnParams {
  Conv2d<Scalar> fc1, fc2;

  static FfnParams make(ParameterSet<Scalar>& params, const std::string& name, int channels, int expansion, Rng& rng);
};

/// Per-token d -> e*d -> GELU -> d.
template <typename Scalar>
Var<Scalar> ffn(const Var<Scalar>& x, const FfnParams<Scalar>& p);

/// Weights of one XCiT block at one scale. Self blocks (global context) draw
/// keys, queries and values from one stream; cross blocks (motion grouping)
/// draw keys/queries from the global context and values from the motion
/// stream, with an output projection back to the motion width.
template <typename Scalar>
struct XcitBlockParams {
  bool cross = false;
  int heads = 1;
  Var<Scalar> norm_kq_gain, norm_kq_bias;
  Var<Scalar> norm_v_gain, norm_v_bias;  // cross only
  Conv2d<Scalar> key, query, value;
  Conv2d<Scalar> out;  // cross only
  Var<Scalar> log_temperature;
  Var<Scalar> gamma1, gamma2, gamma3;
  Var<Scalar> norm2_gain, norm2_bias, norm3_gain, norm3_bias;
  LpiParams<Scalar> lpi;
  FfnParams<Scalar> ffn;

  static XcitBlockParams make_self(ParameterSet<Scalar>& params, const std::string& name, int channels, int heads,
                                   int ffn_expansion, double gamma_init, Rng& rng);
  static XcitBlockParams make_cross(ParameterSet<Scalar>& params, const std::string& name, int context_channels,
                                    int motion_channels, int heads, int ffn_expansion, double gamma_init, Rng& rng);
};

/// GC_s from C_s: embed, then XCA, LPI and FFN residual updates.
template <typename Scalar>
Var<Scalar> global_context_block(const Var<Scalar>& context, const XcitBlockParams<Scalar>& p);

/// CMF from (GC_s, MF). The residual stream is the motion path, so zero
/// gammas return MF unchanged; no embedding is added to MF.
template <typename Scalar>
Var<Scalar> cross_motion_grouping(const Var<Scalar>& global_context, const Var<Scalar>& motion,
                                  const XcitBlockParams<Scalar>& p);

}  // namespace ccmr
