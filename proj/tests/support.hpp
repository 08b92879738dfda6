#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "ccmr/nn.hpp"

namespace ccmr::test {

using T = Tensor<double>;
using V = Var<double>;

inline T randn(int c, int h, int w, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  T t(c, h, w);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

inline T randu(int c, int h, int w, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  T t(c, h, w);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

inline V leaf(T t) { return V(std::move(t), true); }

inline double max_abs_diff(const MatrixX<double>& a, const MatrixX<double>& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

/// Analytic vs central-difference gradients of `loss()` (a 1x1x1 Var).
/// `max_rel` is the worst per-input relative error |a - n|_2 / max(|a|_2, |n|_2)
/// over the checked entries of that input; entry-wise ratios would be
/// dominated by round-off on near-zero entries.
struct GradCheck {
  double max_rel = 0.0;
  double max_abs = 0.0;
  int checked = 0;
};

inline GradCheck check_gradients(const std::function<V()>& loss, std::vector<V> inputs, double step = 1e-6,
                                 double floor = 1e-6, int max_entries_per_input = 400, std::uint64_t seed = 0) {
  for (auto& in : inputs) in.zero_grad();
  V out = loss();
  backward(out);
  std::vector<T> analytic;
  for (const auto& in : inputs) {
    analytic.push_back(in.grad().empty() ? T::zeros_like(in.value()) : in.grad());
  }
  GradCheck result;
  Rng rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    V in = inputs[k];
    const Eigen::Index n = in.value().size();
    std::vector<Eigen::Index> idx(n);
    for (Eigen::Index i = 0; i < n; ++i) idx[i] = i;
    if (n > max_entries_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_entries_per_input);
    }
    double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
    for (Eigen::Index i : idx) {
      double& x = in.mutable_value().data()[i];
      const double saved = x;
      x = saved + step;
      const double up = loss().value()(0, 0, 0);
      x = saved - step;
      const double down = loss().value()(0, 0, 0);
      x = saved;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[k].data()[i];
      diff_sq += (a - numeric) * (a - numeric);
      a_sq += a * a;
      n_sq += numeric * numeric;
      result.max_abs = std::max(result.max_abs, std::abs(a - numeric));
      ++result.checked;
    }
    const double denom = std::max({std::sqrt(a_sq), std::sqrt(n_sq), floor});
    result.max_rel = std::max(result.max_rel, std::sqrt(diff_sq) / denom);
  }
  return result;
}

/// Projects a tensor-valued function onto a scalar with fixed random weights,
/// so every output entry contributes to the checked gradient.
inline std::function<V()> project(std::function<V()> f, std::uint64_t seed = 99) {
  Rng rng(seed);
  const T probe = f().value();
  auto weights = std::make_shared<T>(randn(probe.channels(), probe.height(), probe.width(), rng));
  return [f = std::move(f), weights] { return weighted_sum(f(), *weights); };
}

}  // namespace ccmr::test

namespace ccmr::test {

/// Overwrites every parameter with N(0, sd^2) noise; names ending in "gain"
/// are centred on 1 instead.
inline void randomize(ParameterSet<double>& params, Rng& rng, double sd = 0.5) {
  std::normal_distribution<double> dist(0.0, sd);
  for (const auto& p : params.entries()) {
    V v = p.var;
    const bool gain = p.name.size() >= 4 && p.name.compare(p.name.size() - 4, 4, "gain") == 0;
    for (Eigen::Index i = 0; i < v.value().size(); ++i) v.mutable_value().data()[i] = (gain ? 1.0 : 0.0) + dist(rng);
  }
}

inline std::vector<V> all_parameters(const ParameterSet<double>& params) {
  std::vector<V> out;
  for (const auto& p : params.entries()) out.push_back(p.var);
  return out;
}

}  // namespace ccmr::test
