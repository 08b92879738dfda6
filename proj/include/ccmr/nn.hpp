#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ccmr/ops.hpp"

namespace ccmr {

using Rng = std::mt19937_64;

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Var<Scalar> var;
};

/// Ordered registry of trainable tensors. Names are dotted paths
/// ("gru.convz1.weight"); the leading component is the parameter group.
template <typename Scalar>
class ParameterSet {
 public:
  Var<Scalar> add(const std::string& name, Tensor<Scalar> init) {
    for (const auto& p : entries_) {
      if (p.name == name) throw ConfigError("duplicate parameter name " + name);
    }
    Var<Scalar> v(std::move(init), true);
    entries_.push_back({name, v});
    return v;
  }

  const std::vector<NamedParameter<Scalar>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const NamedParameter<Scalar>* find(const std::string& name) const {
    for (const auto& p : entries_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : entries_) n += static_cast<std::size_t>(p.var.value().size());
    return n;
  }

  void zero_grad() {
    for (auto& p : entries_) p.var.zero_grad();
  }

 private:
  std::vector<NamedParameter<Scalar>> entries_;
};

/// Uniform(-bound, bound) tensor.
template <typename Scalar>
Tensor<Scalar> uniform_tensor(int c, int h, int w, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Scalar> t(c, h, w);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  /// He-uniform weights (gain for ReLU follow-ups), zero bias.
  Conv2d(ParameterSet<Scalar>& params, const std::string& name, int in_channels, int out_channels, int kernel_h,
         int kernel_w, int stride, Rng& rng, double gain = 1.0)
      : geometry_(ConvGeometry::same(kernel_h, kernel_w, stride)), in_(in_channels), out_(out_channels) {
    const int fan_in = in_channels * kernel_h * kernel_w;
    const double bound = gain * std::sqrt(3.0 / fan_in);
    weight = params.add(name + ".weight", uniform_tensor<Scalar>(out_channels, 1, fan_in, bound, rng));
    bias = params.add(name + ".bias", Tensor<Scalar>(out_channels, 1, 1));
  }
  Conv2d(ParameterSet<Scalar>& params, const std::string& name, int in_channels, int out_channels, int kernel, int stride,
         Rng& rng, double gain = 1.0)
      : Conv2d(params, name, in_channels, out_channels, kernel, kernel, stride, rng, gain) {}

  Var<Scalar> operator()(const Var<Scalar>& x) const { return conv2d(x, weight, bias, geometry_); }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  Var<Scalar> weight;
  Var<Scalar> bias;

 private:
  ConvGeometry geometry_;
  int in_ = 0;
  int out_ = 0;
};

inline constexpr double kReluGain = 1.4142135623730951;

}  // namespace ccmr
