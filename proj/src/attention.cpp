#include "ccmr/attention.hpp"

#include <cmath>

namespace ccmr {

template <typename Scalar>
Tensor<Scalar> sinusoidal_embedding(int channels, int height, int width) {
  if (channels <= 0 || channels % 2 != 0) {
    throw ConfigError("positional embedding needs an even channel count, got " + std::to_string(channels));
  }
  const int half = channels / 2;
  Tensor<Scalar> pe(channels, height, width);
  for (int k = 0; k < half; ++k) {
    const double freq = std::pow(10000.0, -2.0 * (k / 2) / half);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double ay = y * freq, ax = x * freq;
        pe(k, y, x) = static_cast<Scalar>(k % 2 == 0 ? std::sin(ay) : std::cos(ay));
        pe(half + k, y, x) = static_cast<Scalar>(k % 2 == 0 ? std::sin(ax) : std::cos(ax));
      }
    }
  }
  return pe;
}

template <typename Scalar>
Var<Scalar> positional_embed(const Var<Scalar>& x) {
  return add_constant(x, sinusoidal_embedding<Scalar>(x.channels(), x.height(), x.width()));
}

template <typename Scalar>
KeyQueryValue<Scalar> kqv_project(const Var<Scalar>& x_norm, const Conv2d<Scalar>& key, const Conv2d<Scalar>& query,
                                  const Conv2d<Scalar>& value, int heads) {
  if (heads <= 0 || key.out_channels() % heads != 0 || value.out_channels() != key.out_channels()) {
    throw ConfigError("kqv_project: " + std::to_string(key.out_channels()) + " channels not divisible into " +
                      std::to_string(heads) + " heads");
  }
  return {key(x_norm), query(x_norm), value(x_norm)};
}

template <typename Scalar>
MatrixX<Scalar> head_block(const Tensor<Scalar>& x, int head, int heads) {
  const int dh = x.channels() / heads;
  return x.mat().middleRows(head * dh, dh).transpose();
}

namespace {

// Rows of `m` scaled to unit L2 norm (floored); returns the norms used.
template <typename Scalar>
VectorX<Scalar> normalize_rows(MatrixX<Scalar>& m) {
  VectorX<Scalar> norms(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    norms(i) = std::max(m.row(i).norm(), Scalar(kXcaNormFloor));
    m.row(i) /= norms(i);
  }
  return norms;
}

template <typename Scalar>
void softmax_columns(MatrixX<Scalar>& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const Scalar top = m.col(j).maxCoeff();
    m.col(j) = (m.col(j).array() - top).exp().matrix();
    m.col(j) /= m.col(j).sum();
  }
}

// Backward of row normalization: x -> x / max(|x|, floor).
template <typename Scalar>
MatrixX<Scalar> normalize_rows_backward(const MatrixX<Scalar>& normalized, const VectorX<Scalar>& norms,
                                        const MatrixX<Scalar>& d_normalized) {
  MatrixX<Scalar> d(normalized.rows(), normalized.cols());
  for (Eigen::Index i = 0; i < normalized.rows(); ++i) {
    if (norms(i) > Scalar(kXcaNormFloor)) {
      const Scalar proj = normalized.row(i).dot(d_normalized.row(i));
      d.row(i) = (d_normalized.row(i) - proj * normalized.row(i)) / norms(i);
    } else {
      d.row(i) = d_normalized.row(i) / norms(i);
    }
  }
  return d;
}

template <typename Scalar>
void check_xca_shapes(const Tensor<Scalar>& key, const Tensor<Scalar>& query, const Tensor<Scalar>& value,
                      Eigen::Index temperatures, int heads) {
  require_same_shape(key, query, "xca key/query");
  require_same_shape(key, value, "xca key/value");
  if (heads <= 0 || key.channels() % heads != 0) {
    throw ConfigError("xca: " + std::to_string(key.channels()) + " channels not divisible into " +
                      std::to_string(heads) + " heads");
  }
  if (temperatures != heads) throw ShapeError("xca: need one temperature per head");
  if (key.pixels() < 1) throw ShapeError("xca: no tokens");
}

}  // namespace

template <typename Scalar>
XcaForward<Scalar> xca_forward(const Tensor<Scalar>& key, const Tensor<Scalar>& query, const Tensor<Scalar>& value,
                               const VectorX<Scalar>& temperature, int heads) {
  check_xca_shapes(key, query, value, temperature.size(), heads);
  const int dh = key.channels() / heads;
  XcaForward<Scalar> result{Tensor<Scalar>::zeros_like(value), {}};
  for (int h = 0; h < heads; ++h) {
    MatrixX<Scalar> k = key.mat().middleRows(h * dh, dh);
    MatrixX<Scalar> q = query.mat().middleRows(h * dh, dh);
    normalize_rows(k);
    normalize_rows(q);
    MatrixX<Scalar> a = (k * q.transpose()) / temperature(h);
    softmax_columns(a);
    result.output.mat().middleRows(h * dh, dh).noalias() = a.transpose() * value.mat().middleRows(h * dh, dh);
    result.attention.push_back(std::move(a));
  }
  return result;
}

template <typename Scalar>
Var<Scalar> xca(const Var<Scalar>& key, const Var<Scalar>& query, const Var<Scalar>& value,
                const Var<Scalar>& log_temperature, int heads) {
  check_xca_shapes(key.value(), query.value(), value.value(), log_temperature.value().size(), heads);
  const int dh = key.channels() / heads;
  struct HeadCache {
    MatrixX<Scalar> k_hat, q_hat, attention;
    VectorX<Scalar> k_norm, q_norm;
    Scalar tau;
  };
  std::vector<HeadCache> cache(heads);
  Tensor<Scalar> out = Tensor<Scalar>::zeros_like(value.value());
  for (int h = 0; h < heads; ++h) {
    HeadCache& c = cache[h];
    c.tau = std::exp(log_temperature.value().data()[h]);
    c.k_hat = key.value().mat().middleRows(h * dh, dh);
    c.q_hat = query.value().mat().middleRows(h * dh, dh);
    c.k_norm = normalize_rows(c.k_hat);
    c.q_norm = normalize_rows(c.q_hat);
    c.attention = (c.k_hat * c.q_hat.transpose()) / c.tau;
    softmax_columns(c.attention);
    out.mat().middleRows(h * dh, dh).noalias() = c.attention.transpose() * value.value().mat().middleRows(h * dh, dh);
  }
  return record<Scalar>(std::move(out), {key, query, value, log_temperature},
                        [cache = std::move(cache), heads, dh](Node<Scalar>& self) {
                          for (int h = 0; h < heads; ++h) {
                            const HeadCache& c = cache[h];
                            const auto d_out = self.grad.mat().middleRows(h * dh, dh);
                            const auto v = self.parent_value(2).mat().middleRows(h * dh, dh);
                            if (self.parent_needs_grad(2)) {
                              self.parent_grad(2).middleRows(h * dh, dh).noalias() += c.attention * d_out;
                            }
                            const MatrixX<Scalar> d_a = v * d_out.transpose();
                            MatrixX<Scalar> d_logits(dh, dh);
                            for (int j = 0; j < dh; ++j) {
                              const Scalar inner = c.attention.col(j).dot(d_a.col(j));
                              d_logits.col(j) = c.attention.col(j).cwiseProduct((d_a.col(j).array() - inner).matrix());
                            }
                            if (self.parent_needs_grad(3)) {
                              const MatrixX<Scalar> logits = (c.k_hat * c.q_hat.transpose()) / c.tau;
                              self.parent_grad(3)(h, 0) -= (d_logits.array() * logits.array()).sum();
                            }
                            if (self.parent_needs_grad(0)) {
                              const MatrixX<Scalar> d_k_hat = d_logits * c.q_hat / c.tau;
                              self.parent_grad(0).middleRows(h * dh, dh) +=
                                  normalize_rows_backward(c.k_hat, c.k_norm, d_k_hat);
                            }
                            if (self.parent_needs_grad(1)) {
                              const MatrixX<Scalar> d_q_hat = d_logits.transpose() * c.k_hat / c.tau;
                              self.parent_grad(1).middleRows(h * dh, dh) +=
                                  normalize_rows_backward(c.q_hat, c.q_norm, d_q_hat);
                            }
                          }
                        });
}

template <typename Scalar>
LpiParams<Scalar> LpiParams<Scalar>::make(ParameterSet<Scalar>& params, const std::string& name, int channels, Rng& rng) {
  LpiParams p;
  const double bound = std::sqrt(3.0 / 9.0);
  p.dw1_weight = params.add(name + ".dw1.weight", uniform_tensor<Scalar>(channels, 1, 9, bound, rng));
  p.dw1_bias = params.add(name + ".dw1.bias", Tensor<Scalar>(channels, 1, 1));
  p.norm_gain = params.add(name + ".norm.gain", Tensor<Scalar>::constant(channels, 1, 1, Scalar(1)));
  p.norm_shift = params.add(name + ".norm.shift", Tensor<Scalar>(channels, 1, 1));
  p.dw2_weight = params.add(name + ".dw2.weight", uniform_tensor<Scalar>(channels, 1, 9, bound, rng));
  p.dw2_bias = params.add(name + ".dw2.bias", Tensor<Scalar>(channels, 1, 1));
  return p;
}

template <typename Scalar>
Var<Scalar> lpi(const Var<Scalar>& x, const LpiParams<Scalar>& p) {
  Var<Scalar> y = gelu(depthwise_conv2d(x, p.dw1_weight, p.dw1_bias, 3));
  y = affine_channels(y, p.norm_gain, p.norm_shift);
  return depthwise_conv2d(y, p.dw2_weight, p.dw2_bias, 3);
}

template <typename Scalar>
FfnParams<Scalar> FfnParams<Scalar>::make(ParameterSet<Scalar>& params, const std::string& name, int channels,
                                          int expansion, Rng& rng) {
  return {Conv2d<Scalar>(params, name + ".fc1", channels, channels * expansion, 1, 1, rng, kReluGain),
          Conv2d<Scalar>(params, name + ".fc2", channels * expansion, channels, 1, 1, rng)};
}

template <typename Scalar>
Var<Scalar> ffn(const Var<Scalar>& x, const FfnParams<Scalar>& p) {
  return p.fc2(gelu(p.fc1(x)));
}

namespace {

template <typename Scalar>
Var<Scalar> ones_param(ParameterSet<Scalar>& params, const std::string& name, int channels) {
  return params.add(name, Tensor<Scalar>::constant(channels, 1, 1, Scalar(1)));
}

template <typename Scalar>
Var<Scalar> zeros_param(ParameterSet<Scalar>& params, const std::string& name, int channels) {
  return params.add(name, Tensor<Scalar>(channels, 1, 1));
}

template <typename Scalar>
void add_residual_params(XcitBlockParams<Scalar>& p, ParameterSet<Scalar>& params, const std::string& name,
                         int stream, int ffn_expansion, double gamma_init, Rng& rng) {
  p.log_temperature = zeros_param(params, name + ".log_temperature", p.heads);
  p.gamma1 = params.add(name + ".gamma1", Tensor<Scalar>::constant(stream, 1, 1, Scalar(gamma_init)));
  p.gamma2 = params.add(name + ".gamma2", Tensor<Scalar>::constant(stream, 1, 1, Scalar(gamma_init)));
  p.gamma3 = params.add(name + ".gamma3", Tensor<Scalar>::constant(stream, 1, 1, Scalar(gamma_init)));
  p.norm2_gain = ones_param(params, name + ".norm2.gain", stream);
  p.norm2_bias = zeros_param(params, name + ".norm2.bias", stream);
  p.norm3_gain = ones_param(params, name + ".norm3.gain", stream);
  p.norm3_bias = zeros_param(params, name + ".norm3.bias", stream);
  p.lpi = LpiParams<Scalar>::make(params, name + ".lpi", stream, rng);
  p.ffn = FfnParams<Scalar>::make(params, name + ".ffn", stream, ffn_expansion, rng);
}

template <typename Scalar>
Var<Scalar> local_and_channel_mixing(Var<Scalar> x, const XcitBlockParams<Scalar>& p) {
  x = x + scale_channels(lpi(layer_norm(x, p.norm2_gain, p.norm2_bias), p.lpi), p.gamma2);
  return x + scale_channels(ffn(layer_norm(x, p.norm3_gain, p.norm3_bias), p.ffn), p.gamma3);
}

}  // namespace

template <typename Scalar>
XcitBlockParams<Scalar> XcitBlockParams<Scalar>::make_self(ParameterSet<Scalar>& params, const std::string& name,
                                                           int channels, int heads, int ffn_expansion,
                                                           double gamma_init, Rng& rng) {
  if (heads <= 0 || channels % heads != 0) throw ConfigError(name + ": channels not divisible by heads");
  XcitBlockParams p;
  p.cross = false;
  p.heads = heads;
  p.norm_kq_gain = ones_param(params, name + ".norm1.gain", channels);
  p.norm_kq_bias = zeros_param(params, name + ".norm1.bias", channels);
  p.key = Conv2d<Scalar>(params, name + ".key", channels, channels, 1, 1, rng);
  p.query = Conv2d<Scalar>(params, name + ".query", channels, channels, 1, 1, rng);
  p.value = Conv2d<Scalar>(params, name + ".value", channels, channels, 1, 1, rng);
  add_residual_params(p, params, name, channels, ffn_expansion, gamma_init, rng);
  return p;
}

template <typename Scalar>
XcitBlockParams<Scalar> XcitBlockParams<Scalar>::make_cross(ParameterSet<Scalar>& params, const std::string& name,
                                                            int context_channels, int motion_channels, int heads,
                                                            int ffn_expansion, double gamma_init, Rng& rng) {
  if (heads <= 0 || context_channels % heads != 0) throw ConfigError(name + ": channels not divisible by heads");
  XcitBlockParams p;
  p.cross = true;
  p.heads = heads;
  p.norm_kq_gain = ones_param(params, name + ".norm_kq.gain", context_channels);
  p.norm_kq_bias = zeros_param(params, name + ".norm_kq.bias", context_channels);
  p.norm_v_gain = ones_param(params, name + ".norm_v.gain", motion_channels);
  p.norm_v_bias = zeros_param(params, name + ".norm_v.bias", motion_channels);
  p.key = Conv2d<Scalar>(params, name + ".key", context_channels, context_channels, 1, 1, rng);
  p.query = Conv2d<Scalar>(params, name + ".query", context_channels, context_channels, 1, 1, rng);
  p.value = Conv2d<Scalar>(params, name + ".value", motion_channels, context_channels, 1, 1, rng);
  p.out = Conv2d<Scalar>(params, name + ".out", context_channels, motion_channels, 1, 1, rng);
  add_residual_params(p, params, name, motion_channels, ffn_expansion, gamma_init, rng);
  return p;
}

template <typename Scalar>
Var<Scalar> global_context_block(const Var<Scalar>& context, const XcitBlockParams<Scalar>& p) {
  if (p.cross) throw ConfigError("global_context_block needs self-attention parameters");
  Var<Scalar> embedded = positional_embed(context);
  const auto kqv = kqv_project(layer_norm(embedded, p.norm_kq_gain, p.norm_kq_bias), p.key, p.query, p.value, p.heads);
  Var<Scalar> x = embedded + scale_channels(xca(kqv.key, kqv.query, kqv.value, p.log_temperature, p.heads), p.gamma1);
  return local_and_channel_mixing(x, p);
}

template <typename Scalar>
Var<Scalar> cross_motion_grouping(const Var<Scalar>& global_context, const Var<Scalar>& motion,
                                  const XcitBlockParams<Scalar>& p) {
  if (!p.cross) throw ConfigError("cross_motion_grouping needs cross-attention parameters");
  require_same_spatial(global_context.value(), motion.value(), "cross_motion_grouping");
  Var<Scalar> kq_in = layer_norm(positional_embed(global_context), p.norm_kq_gain, p.norm_kq_bias);
  Var<Scalar> key = p.key(kq_in);
  Var<Scalar> query = p.query(kq_in);
  Var<Scalar> value = p.value(layer_norm(motion, p.norm_v_gain, p.norm_v_bias));
  Var<Scalar> attended = p.out(xca(key, query, value, p.log_temperature, p.heads));
  Var<Scalar> x = motion + scale_channels(attended, p.gamma1);
  return local_and_channel_mixing(x, p);
}

#define CCMR_INSTANTIATE_ATTENTION(S)                                                                          \
  template Tensor<S> sinusoidal_embedding<S>(int, int, int);                                                   \
  template Var<S> positional_embed(const Var<S>&);                                                             \
  template KeyQueryValue<S> kqv_project(const Var<S>&, const Conv2d<S>&, const Conv2d<S>&, const Conv2d<S>&,   \
                                        int);                                                                  \
  template MatrixX<S> head_block(const Tensor<S>&, int, int);                                                  \
  template XcaForward<S> xca_forward(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const VectorX<S>&,  \
                                     int);                                                                     \
  template Var<S> xca(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&, int);                        \
  template struct LpiParams<S>;                                                                                \
  template Var<S> lpi(const Var<S>&, const LpiParams<S>&);                                                     \
  template struct FfnParams<S>;                                                                                \
  template Var<S> ffn(const Var<S>&, const FfnParams<S>&);                                                     \
  template struct XcitBlockParams<S>;                                                                          \
  template Var<S> global_context_block(const Var<S>&, const XcitBlockParams<S>&);                              \
  template Var<S> cross_motion_grouping(const Var<S>&, const Var<S>&, const XcitBlockParams<S>&);

CCMR_INSTANTIATE_ATTENTION(float)
CCMR_INSTANTIATE_ATTENTION(double)

}  // namespace ccmr
