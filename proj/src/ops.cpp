#include "ccmr/ops.hpp"

#include <algorithm>
#include <cmath>

namespace ccmr {
namespace {

template <typename Scalar>
MatrixX<Scalar> im2col(const Tensor<Scalar>& x, const ConvGeometry& g, int out_h, int out_w) {
  const int channels = x.channels();
  const int rows = channels * g.kernel_h * g.kernel_w;
  MatrixX<Scalar> cols = MatrixX<Scalar>::Zero(rows, static_cast<Eigen::Index>(out_h) * out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      Scalar* dst = cols.col(oy * out_w + ox).data();
      for (int ky = 0; ky < g.kernel_h; ++ky) {
        const int iy = oy * g.stride - g.pad_h + ky;
        if (iy < 0 || iy >= x.height()) continue;
        for (int kx = 0; kx < g.kernel_w; ++kx) {
          const int ix = ox * g.stride - g.pad_w + kx;
          if (ix < 0 || ix >= x.width()) continue;
          const Scalar* src = x.data() + static_cast<Eigen::Index>(iy * x.width() + ix) * channels;
          std::copy(src, src + channels, dst + (ky * g.kernel_w + kx) * channels);
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im_add(const MatrixX<Scalar>& cols, const ConvGeometry& g, int out_h, int out_w, MatrixX<Scalar>& dx,
                int channels, int height, int width) {
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const Scalar* src = cols.col(oy * out_w + ox).data();
      for (int ky = 0; ky < g.kernel_h; ++ky) {
        const int iy = oy * g.stride - g.pad_h + ky;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < g.kernel_w; ++kx) {
          const int ix = ox * g.stride - g.pad_w + kx;
          if (ix < 0 || ix >= width) continue;
          Scalar* dst = dx.data() + static_cast<Eigen::Index>(iy * width + ix) * channels;
          const Scalar* s = src + (ky * g.kernel_w + kx) * channels;
          for (int c = 0; c < channels; ++c) dst[c] += s[c];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0;
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, const ConvGeometry& g) {
  const Tensor<Scalar>& in = x.value();
  const MatrixX<Scalar>& w = weight.value().mat();
  const int out_ch = weight.value().channels();
  if (w.cols() != static_cast<Eigen::Index>(in.channels()) * g.kernel_h * g.kernel_w) {
    throw ShapeError("conv2d: weight expects " + std::to_string(w.cols() / (g.kernel_h * g.kernel_w)) +
                     " input channels, got " + std::to_string(in.channels()));
  }
  const int out_h = g.out_height(in.height());
  const int out_w = g.out_width(in.width());
  if (out_h <= 0 || out_w <= 0) throw ShapeError("conv2d: input too small " + in.shape_string());

  const bool pointwise = is_pointwise(g);
  MatrixX<Scalar> cols;
  if (!pointwise) cols = im2col(in, g, out_h, out_w);
  Tensor<Scalar> out(out_ch, out_h, out_w);
  if (pointwise) {
    out.mat().noalias() = w * in.mat();
  } else {
    out.mat().noalias() = w * cols;
  }
  if (bias) out.mat().colwise() += bias.value().mat().col(0);

  std::vector<Var<Scalar>> parents{x, weight};
  if (bias) parents.push_back(bias);
  const int in_c = in.channels(), in_h = in.height(), in_w = in.width();
  return record<Scalar>(std::move(out), std::move(parents),
                        [g, pointwise, cols = std::move(cols), out_h, out_w, in_c, in_h, in_w](Node<Scalar>& self) {
                          const MatrixX<Scalar>& dy = self.grad.mat();
                          const MatrixX<Scalar>& w = self.parent_value(1).mat();
                          if (self.parent_needs_grad(1)) {
                            if (pointwise) {
                              self.parent_grad(1).noalias() += dy * self.parent_value(0).mat().transpose();
                            } else {
                              self.parent_grad(1).noalias() += dy * cols.transpose();
                            }
                          }
                          if (self.parents.size() > 2 && self.parent_needs_grad(2)) {
                            self.parent_grad(2).col(0) += dy.rowwise().sum();
                          }
                          if (self.parent_needs_grad(0)) {
                            if (pointwise) {
                              self.parent_grad(0).noalias() += w.transpose() * dy;
                            } else {
                              MatrixX<Scalar> dcols = w.transpose() * dy;
                              col2im_add(dcols, g, out_h, out_w, self.parent_grad(0), in_c, in_h, in_w);
                            }
                          }
                        });
}

template <typename Scalar>
Var<Scalar> depthwise_conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, int kernel) {
  const Tensor<Scalar>& in = x.value();
  const MatrixX<Scalar>& w = weight.value().mat();
  if (weight.value().channels() != in.channels() || w.cols() != kernel * kernel) {
    throw ShapeError("depthwise_conv2d: weight " + weight.value().shape_string() + " for input " + in.shape_string());
  }
  const int h = in.height(), wd = in.width(), half = kernel / 2;
  Tensor<Scalar> out(in.channels(), h, wd);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < wd; ++xx) {
      auto dst = out.mat().col(y * wd + xx);
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = y + ky - half;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = xx + kx - half;
          if (ix < 0 || ix >= wd) continue;
          dst += w.col(ky * kernel + kx).cwiseProduct(in.mat().col(iy * wd + ix));
        }
      }
    }
  }
  if (bias) out.mat().colwise() += bias.value().mat().col(0);
  std::vector<Var<Scalar>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return record<Scalar>(std::move(out), std::move(parents), [kernel, h, wd, half](Node<Scalar>& self) {
    const MatrixX<Scalar>& dy = self.grad.mat();
    const MatrixX<Scalar>& in = self.parent_value(0).mat();
    const MatrixX<Scalar>& w = self.parent_value(1).mat();
    const bool need_x = self.parent_needs_grad(0), need_w = self.parent_needs_grad(1);
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < wd; ++xx) {
        const auto g = dy.col(y * wd + xx);
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = y + ky - half;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = xx + kx - half;
            if (ix < 0 || ix >= wd) continue;
            const int k = ky * kernel + kx;
            if (need_x) self.parent_grad(0).col(iy * wd + ix) += w.col(k).cwiseProduct(g);
            if (need_w) self.parent_grad(1).col(k) += in.col(iy * wd + ix).cwiseProduct(g);
          }
        }
      }
    }
    if (self.parents.size() > 2 && self.parent_needs_grad(2)) self.parent_grad(2).col(0) += dy.rowwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<Scalar> out = a.value();
  out.mat() += b.value().mat();
  return record<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (self.parent_needs_grad(0)) self.parent_grad(0) += self.grad.mat();
    if (self.parent_needs_grad(1)) self.parent_grad(1) += self.grad.mat();
  });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<Scalar> out = a.value();
  out.mat() -= b.value().mat();
  return record<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (self.parent_needs_grad(0)) self.parent_grad(0) += self.grad.mat();
    if (self.parent_needs_grad(1)) self.parent_grad(1) -= self.grad.mat();
  });
}

template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<Scalar> out = a.value();
  out.mat().array() *= b.value().mat().array();
  return record<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (self.parent_needs_grad(0))
      self.parent_grad(0).array() += self.grad.mat().array() * self.parent_value(1).mat().array();
    if (self.parent_needs_grad(1))
      self.parent_grad(1).array() += self.grad.mat().array() * self.parent_value(0).mat().array();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  Tensor<Scalar> out = x.value();
  out.mat() *= factor;
  return record<Scalar>(std::move(out), {x}, [factor](Node<Scalar>& self) {
    self.parent_grad(0) += factor * self.grad.mat();
  });
}

template <typename Scalar>
Var<Scalar> add_constant(const Var<Scalar>& x, const Tensor<Scalar>& constant) {
  require_same_shape(x.value(), constant, "add_constant");
  Tensor<Scalar> out = x.value();
  out.mat() += constant.mat();
  return record<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) { self.parent_grad(0) += self.grad.mat(); });
}

template <typename Scalar>
Var<Scalar> scale_channels(const Var<Scalar>& x, const Var<Scalar>& gamma) {
  if (gamma.value().channels() != x.channels() || gamma.value().pixels() != 1) {
    throw ShapeError("scale_channels: gamma " + gamma.value().shape_string() + " for " + x.value().shape_string());
  }
  Tensor<Scalar> out = x.value();
  out.mat().array().colwise() *= gamma.value().mat().col(0).array();
  return record<Scalar>(std::move(out), {x, gamma}, [](Node<Scalar>& self) {
    const auto& g = self.parent_value(1).mat().col(0);
    if (self.parent_needs_grad(0)) self.parent_grad(0).array() += self.grad.mat().array().colwise() * g.array();
    if (self.parent_needs_grad(1))
      self.parent_grad(1).col(0) += (self.grad.mat().array() * self.parent_value(0).mat().array()).rowwise().sum().matrix();
  });
}

template <typename Scalar>
Var<Scalar> affine_channels(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& shift) {
  Tensor<Scalar> out = x.value();
  out.mat().array().colwise() *= gain.value().mat().col(0).array();
  out.mat().colwise() += shift.value().mat().col(0);
  return record<Scalar>(std::move(out), {x, gain, shift}, [](Node<Scalar>& self) {
    const auto& g = self.parent_value(1).mat().col(0);
    if (self.parent_needs_grad(0)) self.parent_grad(0).array() += self.grad.mat().array().colwise() * g.array();
    if (self.parent_needs_grad(1))
      self.parent_grad(1).col(0) += (self.grad.mat().array() * self.parent_value(0).mat().array()).rowwise().sum().matrix();
    if (self.parent_needs_grad(2)) self.parent_grad(2).col(0) += self.grad.mat().rowwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  out.mat() = out.mat().cwiseMax(Scalar(0));
  return record<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    self.parent_grad(0).array() +=
        (self.parent_value(0).mat().array() > Scalar(0)).select(self.grad.mat().array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  const Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  Tensor<Scalar> out = x.value();
  out.mat() = x.value().mat().unaryExpr([inv_sqrt2](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
  return record<Scalar>(std::move(out), {x}, [inv_sqrt2](Node<Scalar>& self) {
    const Scalar inv_sqrt_2pi = Scalar(0.39894228040143267794);
    auto d = self.parent_value(0).mat().unaryExpr([&](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    });
    self.parent_grad(0).array() += self.grad.mat().array() * d.array();
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  out.mat() = x.value().mat().unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
  return record<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    const auto s = self.value.mat().array();
    self.parent_grad(0).array() += self.grad.mat().array() * s * (Scalar(1) - s);
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  out.mat() = x.value().mat().array().tanh().matrix();
  return record<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    const auto t = self.value.mat().array();
    self.parent_grad(0).array() += self.grad.mat().array() * (Scalar(1) - t * t);
  });
}

template <typename Scalar>
Var<Scalar> one_minus(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  out.mat() = (Scalar(1) - x.value().mat().array()).matrix();
  return record<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) { self.parent_grad(0) -= self.grad.mat(); });
}

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  int total = 0;
  for (const auto& p : parts) {
    require_same_spatial(p.value(), parts.front().value(), "concat_channels");
    total += p.channels();
  }
  Tensor<Scalar> out(total, parts.front().height(), parts.front().width());
  std::vector<int> offsets;
  int offset = 0;
  for (const auto& p : parts) {
    out.mat().middleRows(offset, p.channels()) = p.value().mat();
    offsets.push_back(offset);
    offset += p.channels();
  }
  return record<Scalar>(std::move(out), parts, [offsets](Node<Scalar>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (!self.parent_needs_grad(i)) continue;
      const auto rows = self.parent_value(i).channels();
      self.parent_grad(i) += self.grad.mat().middleRows(offsets[i], rows);
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& x, int begin, int count) {
  if (begin < 0 || count <= 0 || begin + count > x.channels()) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of " + std::to_string(x.channels()));
  }
  Tensor<Scalar> out(count, x.height(), x.width(), x.value().mat().middleRows(begin, count));
  return record<Scalar>(std::move(out), {x}, [begin, count](Node<Scalar>& self) {
    self.parent_grad(0).middleRows(begin, count) += self.grad.mat();
  });
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps) {
  const MatrixX<Scalar>& in = x.value().mat();
  const auto channels = in.rows();
  const Eigen::Index n = in.cols();
  MatrixX<Scalar> xhat(channels, n);
  VectorX<Scalar> inv_std(n);
  for (Eigen::Index p = 0; p < n; ++p) {
    const Scalar mean = in.col(p).mean();
    const Scalar var = (in.col(p).array() - mean).square().mean();
    inv_std(p) = Scalar(1) / std::sqrt(var + eps);
    xhat.col(p) = (in.col(p).array() - mean) * inv_std(p);
  }
  Tensor<Scalar> out(x.channels(), x.height(), x.width());
  out.mat() = xhat;
  out.mat().array().colwise() *= gain.value().mat().col(0).array();
  out.mat().colwise() += bias.value().mat().col(0);
  return record<Scalar>(std::move(out), {x, gain, bias}, [xhat = std::move(xhat), inv_std](Node<Scalar>& self) {
    const MatrixX<Scalar>& dy = self.grad.mat();
    if (self.parent_needs_grad(1)) self.parent_grad(1).col(0) += (dy.array() * xhat.array()).rowwise().sum().matrix();
    if (self.parent_needs_grad(2)) self.parent_grad(2).col(0) += dy.rowwise().sum();
    if (self.parent_needs_grad(0)) {
      const auto& g = self.parent_value(1).mat().col(0);
      MatrixX<Scalar> dxhat = (dy.array().colwise() * g.array()).matrix();
      auto& dx = self.parent_grad(0);
      for (Eigen::Index p = 0; p < dy.cols(); ++p) {
        const Scalar m1 = dxhat.col(p).mean();
        const Scalar m2 = dxhat.col(p).dot(xhat.col(p)) / Scalar(dxhat.rows());
        dx.col(p).array() += inv_std(p) * (dxhat.col(p).array() - m1 - xhat.col(p).array() * m2);
      }
    }
  });
}

namespace {

struct Tap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int in_size, int factor) {
  std::vector<Tap> taps(static_cast<std::size_t>(in_size) * factor);
  for (int o = 0; o < in_size * factor; ++o) {
    double s = (o + 0.5) / factor - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_size - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, in_size - 1);
    taps[o] = {i0, i1, s - i0};
  }
  return taps;
}

}  // namespace

template <typename Scalar>
Var<Scalar> upsample_bilinear(const Var<Scalar>& x, int factor, Scalar value_scale) {
  if (factor < 1) throw ShapeError("upsample_bilinear: factor must be >= 1");
  const int h = x.height(), w = x.width();
  const int oh = h * factor, ow = w * factor;
  const auto ty = bilinear_taps(h, factor);
  const auto tx = bilinear_taps(w, factor);
  const MatrixX<Scalar>& in = x.value().mat();
  Tensor<Scalar> out(x.channels(), oh, ow);
  for (int oy = 0; oy < oh; ++oy) {
    const Scalar wy1 = Scalar(ty[oy].w1), wy0 = Scalar(1) - wy1;
    for (int ox = 0; ox < ow; ++ox) {
      const Scalar wx1 = Scalar(tx[ox].w1), wx0 = Scalar(1) - wx1;
      out.mat().col(oy * ow + ox) =
          value_scale * (wy0 * wx0 * in.col(ty[oy].i0 * w + tx[ox].i0) + wy0 * wx1 * in.col(ty[oy].i0 * w + tx[ox].i1) +
                         wy1 * wx0 * in.col(ty[oy].i1 * w + tx[ox].i0) + wy1 * wx1 * in.col(ty[oy].i1 * w + tx[ox].i1));
    }
  }
  return record<Scalar>(std::move(out), {x}, [ty, tx, w, oh, ow, value_scale](Node<Scalar>& self) {
    auto& dx = self.parent_grad(0);
    const MatrixX<Scalar>& dy = self.grad.mat();
    for (int oy = 0; oy < oh; ++oy) {
      const Scalar wy1 = Scalar(ty[oy].w1), wy0 = Scalar(1) - wy1;
      for (int ox = 0; ox < ow; ++ox) {
        const Scalar wx1 = Scalar(tx[ox].w1), wx0 = Scalar(1) - wx1;
        const auto g = value_scale * dy.col(oy * ow + ox);
        dx.col(ty[oy].i0 * w + tx[ox].i0) += wy0 * wx0 * g;
        dx.col(ty[oy].i0 * w + tx[ox].i1) += wy0 * wx1 * g;
        dx.col(ty[oy].i1 * w + tx[ox].i0) += wy1 * wx0 * g;
        dx.col(ty[oy].i1 * w + tx[ox].i1) += wy1 * wx1 * g;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& x) {
  return Var<Scalar>(x.value());
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor<Scalar> out(1, 1, 1);
  out(0, 0, 0) = x.value().mat().sum();
  return record<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    self.parent_grad(0).array() += self.grad(0, 0, 0);
  });
}

template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& x, const Tensor<Scalar>& weights) {
  require_same_shape(x.value(), weights, "weighted_sum");
  Tensor<Scalar> out(1, 1, 1);
  out(0, 0, 0) = (x.value().mat().array() * weights.mat().array()).sum();
  return record<Scalar>(std::move(out), {x}, [weights](Node<Scalar>& self) {
    self.parent_grad(0) += self.grad(0, 0, 0) * weights.mat();
  });
}

#define CCMR_INSTANTIATE_OPS(S)                                                                        \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, const ConvGeometry&);            \
  template Var<S> depthwise_conv2d(const Var<S>&, const Var<S>&, const Var<S>&, int);                  \
  template Var<S> operator+(const Var<S>&, const Var<S>&);                                             \
  template Var<S> operator-(const Var<S>&, const Var<S>&);                                             \
  template Var<S> operator*(const Var<S>&, const Var<S>&);                                             \
  template Var<S> scale(const Var<S>&, S);                                                             \
  template Var<S> add_constant(const Var<S>&, const Tensor<S>&);                                       \
  template Var<S> scale_channels(const Var<S>&, const Var<S>&);                                        \
  template Var<S> affine_channels(const Var<S>&, const Var<S>&, const Var<S>&);                        \
  template Var<S> relu(const Var<S>&);                                                                 \
  template Var<S> gelu(const Var<S>&);                                                                 \
  template Var<S> sigmoid(const Var<S>&);                                                              \
  template Var<S> tanh(const Var<S>&);                                                                 \
  template Var<S> one_minus(const Var<S>&);                                                            \
  template Var<S> concat_channels(const std::vector<Var<S>>&);                                         \
  template Var<S> slice_channels(const Var<S>&, int, int);                                             \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                          \
  template Var<S> upsample_bilinear(const Var<S>&, int, S);                                            \
  template Var<S> detach(const Var<S>&);                                                               \
  template Var<S> sum(const Var<S>&);                                                                  \
  template Var<S> weighted_sum(const Var<S>&, const Tensor<S>&);

CCMR_INSTANTIATE_OPS(float)
CCMR_INSTANTIATE_OPS(double)

}  // namespace ccmr
