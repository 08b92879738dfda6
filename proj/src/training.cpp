#include "ccmr/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ccmr {

void LossConfig::validate() const {
  if (weights.empty()) throw ConfigError("loss: no weights");
  for (double w : weights) {
    if (!(w > 0.0)) throw ConfigError("loss: weights must be positive");
  }
  if (kind == LossKind::kRobust && (!(epsilon > 0.0) || !(exponent > 0.0) || exponent > 1.0)) {
    throw ConfigError("loss: robust loss needs epsilon > 0 and exponent in (0, 1]");
  }
}

std::vector<double> make_loss_weights(int count, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("loss weight decay gamma must lie in (0, 1)");
  if (count < 1) throw ConfigError("loss weights: need at least one prediction");
  std::vector<double> w(count);
  for (int k = 0; k < count; ++k) w[k] = std::pow(gamma, count - 1 - k);
  return w;
}

std::vector<double> make_loss_weights(const IterationSchedule& schedule, double gamma) {
  return make_loss_weights(schedule.total(), gamma);
}

template <typename Scalar>
Var<Scalar> multiscale_loss(const std::vector<Var<Scalar>>& predictions, const Tensor<Scalar>& gt,
                            const Tensor<Scalar>& valid, const LossConfig& config) {
  config.validate();
  if (config.weights.size() != predictions.size()) {
    throw ConfigError("loss: " + std::to_string(config.weights.size()) + " weights for " +
                      std::to_string(predictions.size()) + " predictions");
  }
  if (gt.channels() != 2) throw ShapeError("loss: ground truth must have 2 channels");
  if (!valid.empty() && (valid.channels() != 1 || !valid.same_spatial(gt))) throw ShapeError("loss: bad valid mask");
  const int n = gt.pixels();
  std::vector<bool> use(n, true);
  int count = n;
  if (!valid.empty()) {
    count = 0;
    for (int p = 0; p < n; ++p) {
      use[p] = valid.mat()(0, p) != Scalar(0);
      count += use[p];
    }
  }
  const bool robust = config.kind == LossKind::kRobust;
  const double eps = config.epsilon, q = config.exponent;
  // Per prediction, d(loss)/d(prediction).
  std::vector<MatrixX<Scalar>> grads;
  double total = 0.0;
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    require_same_shape(predictions[k].value(), gt, "loss prediction");
    const MatrixX<Scalar>& f = predictions[k].value().mat();
    MatrixX<Scalar> g = MatrixX<Scalar>::Zero(2, n);
    double term = 0.0;
    const double scale = count > 0 ? config.weights[k] / count : 0.0;
    for (int p = 0; p < n; ++p) {
      if (!use[p]) continue;
      const double du = double(f(0, p)) - double(gt.mat()(0, p));
      const double dv = double(f(1, p)) - double(gt.mat()(1, p));
      const double e = std::sqrt(du * du + dv * dv);
      double de = 1.0;
      if (robust) {
        term += std::pow(e + eps, q);
        de = q * std::pow(e + eps, q - 1.0);
      } else {
        term += e;
      }
      if (e > 0.0) {
        g(0, p) = Scalar(scale * de * du / e);
        g(1, p) = Scalar(scale * de * dv / e);
      }
    }
    total += scale * term;
    grads.push_back(std::move(g));
  }
  Tensor<Scalar> out(1, 1, 1);
  out(0, 0, 0) = Scalar(total);
  return record<Scalar>(std::move(out), predictions, [grads = std::move(grads)](Node<Scalar>& self) {
    const Scalar seed = self.grad(0, 0, 0);
    for (std::size_t k = 0; k < grads.size(); ++k) {
      if (self.parent_needs_grad(k)) self.parent_grad(k) += seed * grads[k];
    }
  });
}

template Var<float> multiscale_loss(const std::vector<Var<float>>&, const Tensor<float>&, const Tensor<float>&,
                                    const LossConfig&);
template Var<double> multiscale_loss(const std::vector<Var<double>>&, const Tensor<double>&, const Tensor<double>&,
                                     const LossConfig&);

namespace {

double quintic(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

// Smoothly interpolated random lattice, defined on the whole plane through a
// padded grid (coordinates outside the pad clamp).
class ValueNoise {
 public:
  ValueNoise(double spacing, double extent, double margin, Rng& rng)
      : spacing_(spacing), origin_(-margin), cells_(static_cast<int>(std::ceil((extent + 2 * margin) / spacing)) + 2) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    values_.resize(static_cast<std::size_t>(cells_) * cells_);
    for (double& v : values_) v = dist(rng);
  }

  double operator()(double x, double y) const {
    const double gx = std::clamp((x - origin_) / spacing_, 0.0, cells_ - 1.000001);
    const double gy = std::clamp((y - origin_) / spacing_, 0.0, cells_ - 1.000001);
    const int ix = static_cast<int>(gx), iy = static_cast<int>(gy);
    const double tx = quintic(gx - ix), ty = quintic(gy - iy);
    const auto at = [this](int i, int j) { return values_[static_cast<std::size_t>(j) * cells_ + i]; };
    const double top = at(ix, iy) * (1 - tx) + at(ix + 1, iy) * tx;
    const double bottom = at(ix, iy + 1) * (1 - tx) + at(ix + 1, iy + 1) * tx;
    return top * (1 - ty) + bottom * ty;
  }

 private:
  double spacing_;
  double origin_;
  int cells_;
  std::vector<double> values_;
};

// Three-channel texture: shared luminance octaves plus per-channel colour.
class Texture {
 public:
  Texture(double extent, double margin, Rng& rng) {
    for (double spacing : {16.0, 8.0, 5.0}) luminance_.emplace_back(spacing, extent, margin, rng);
    for (int c = 0; c < 3; ++c) colour_.emplace_back(10.0, extent, margin, rng);
  }

  double operator()(int channel, double x, double y) const {
    static constexpr double kAmp[] = {1.0, 0.7, 0.5};
    double lum = 0.0;
    for (std::size_t o = 0; o < luminance_.size(); ++o) lum += kAmp[o] * luminance_[o](x, y);
    const double v = 0.75 * lum / 2.2 + 0.35 * colour_[channel](x, y);
    return std::tanh(1.8 * v);
  }

 private:
  std::vector<ValueNoise> luminance_;
  std::vector<ValueNoise> colour_;
};

struct SmoothWarp {
  double tx = 0, ty = 0;
  double a00 = 0, a01 = 0, a10 = 0, a11 = 0;
  double cx = 0, cy = 0;
  struct Wave {
    double kx, ky, phase, amp_u, amp_v;
  };
  std::vector<Wave> waves;
  double gain = 1.0;

  void operator()(double x, double y, double& u, double& v) const {
    const double rx = x - cx, ry = y - cy;
    u = tx + a00 * rx + a01 * ry;
    v = ty + a10 * rx + a11 * ry;
    for (const auto& w : waves) {
      const double s = std::sin(w.kx * x + w.ky * y + w.phase);
      u += w.amp_u * s;
      v += w.amp_v * s;
    }
    u *= gain;
    v *= gain;
  }
};

SmoothWarp random_warp(int size, double max_disp, Rng& rng) {
  SmoothWarp warp;
  if (max_disp <= 0.0) {
    warp.gain = 0.0;
    return warp;
  }
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  warp.cx = warp.cy = 0.5 * (size - 1);
  warp.tx = 0.6 * max_disp * unit(rng);
  warp.ty = 0.6 * max_disp * unit(rng);
  warp.a00 = 0.06 * unit(rng);
  warp.a01 = 0.06 * unit(rng);
  warp.a10 = 0.06 * unit(rng);
  warp.a11 = 0.06 * unit(rng);
  for (int i = 0; i < 2; ++i) {
    const double wavelength = size * (0.6 + 0.4 * (unit(rng) + 1.0));
    const double theta = angle(rng);
    const double k = 2.0 * M_PI / wavelength;
    warp.waves.push_back({k * std::cos(theta), k * std::sin(theta), angle(rng), 0.1 * max_disp * unit(rng),
                          0.1 * max_disp * unit(rng)});
  }
  double largest = 0.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double u, v;
      warp(x, y, u, v);
      largest = std::max(largest, std::hypot(u, v));
    }
  }
  if (largest > max_disp) warp.gain = max_disp / largest;
  return warp;
}

float bilinear_at(const Tensor<float>& img, int c, double x, double y, bool& inside) {
  const int h = img.height(), w = img.width();
  inside = x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1;
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  double acc = 0.0;
  for (int j = 0; j < 2; ++j) {
    for (int i = 0; i < 2; ++i) {
      const int xx = x0 + i, yy = y0 + j;
      if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
      acc += (i ? fx : 1 - fx) * (j ? fy : 1 - fy) * img(c, yy, xx);
    }
  }
  return static_cast<float>(acc);
}

}  // namespace

Tensor<float> backward_warp(const Tensor<float>& image, const Tensor<float>& flow) {
  require_same_spatial(image, flow, "backward_warp");
  Tensor<float> out = Tensor<float>::zeros_like(image);
  bool inside = false;
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < image.channels(); ++c) {
        out(c, y, x) = bilinear_at(image, c, x + flow(0, y, x), y + flow(1, y, x), inside);
      }
    }
  }
  return out;
}

std::vector<SyntheticSample> generate_synthetic(int count, int size, std::uint64_t seed, const SyntheticOptions& options) {
  if (size <= 0 || size % 16 != 0) throw ConfigError("synthetic size must be a positive multiple of 16");
  const double max_disp = options.max_displacement < 0.0 ? size / 8.0 : options.max_displacement;
  std::vector<SyntheticSample> samples;
  for (int n = 0; n < count; ++n) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(n)};
    Rng rng(seq);
    const Texture texture(size, max_disp + 4.0, rng);
    const SmoothWarp warp = random_warp(size, max_disp, rng);

    SyntheticSample s{Tensor<float>(3, size, size), Tensor<float>(3, size, size), Tensor<float>(2, size, size),
                      Tensor<float>(1, size, size)};
    Tensor<float> back(2, size, size);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        double u, v;
        warp(x, y, u, v);
        s.flow(0, y, x) = static_cast<float>(u);
        s.flow(1, y, x) = static_cast<float>(v);
        for (int c = 0; c < 3; ++c) s.image1(c, y, x) = static_cast<float>(texture(c, x, y));
        // Frame-2 pixel q shows the frame-1 point p with p + f(p) = q.
        double px = x, py = y;
        for (int it = 0; it < 60; ++it) {
          warp(px, py, u, v);
          px = x - u;
          py = y - v;
        }
        back(0, y, x) = static_cast<float>(px - x);
        back(1, y, x) = static_cast<float>(py - y);
        for (int c = 0; c < 3; ++c) s.image2(c, y, x) = static_cast<float>(texture(c, px, py));
      }
    }
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double qx = x + s.flow(0, y, x), qy = y + s.flow(1, y, x);
        bool inside = false;
        const double bu = bilinear_at(back, 0, qx, qy, inside);
        const double bv = bilinear_at(back, 1, qx, qy, inside);
        const bool consistent = std::hypot(s.flow(0, y, x) + bu, s.flow(1, y, x) + bv) < options.fb_threshold;
        s.valid(0, y, x) = inside && consistent ? 1.0f : 0.0f;
      }
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

template <typename Scalar>
Adam<Scalar>::Adam(ParameterSet<Scalar>& params, double beta1, double beta2, double eps, double weight_decay)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params_.entries()) {
    m_.push_back(Tensor<Scalar>::zeros_like(p.var.value()));
    v_.push_back(Tensor<Scalar>::zeros_like(p.var.value()));
  }
}

template <typename Scalar>
void Adam<Scalar>::step(double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  const auto& entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var<Scalar> var = entries[i].var;
    auto& w = var.mutable_value().mat();
    if (weight_decay_ > 0.0) w *= Scalar(1.0 - lr * weight_decay_);
    if (var.grad().empty()) continue;
    const auto& g = var.grad().mat();
    auto& m = m_[i].mat();
    auto& v = v_[i].mat();
    m = Scalar(beta1_) * m + Scalar(1.0 - beta1_) * g;
    v = Scalar(beta2_) * v + Scalar(1.0 - beta2_) * g.cwiseAbs2();
    w.array() -= Scalar(lr / c1) * m.array() / ((v.array() / Scalar(c2)).sqrt() + Scalar(eps_));
  }
}

template <typename Scalar>
double clip_grad_norm(ParameterSet<Scalar>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.entries()) {
    if (!p.var.grad().empty()) sq += p.var.grad().mat().template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const Scalar factor = Scalar(max_norm / norm);
    for (const auto& p : params.entries()) {
      Var<Scalar> v = p.var;
      if (!v.grad().empty()) v.mutable_grad().mat() *= factor;
    }
  }
  return norm;
}

template class Adam<float>;
template class Adam<double>;
template double clip_grad_norm(ParameterSet<float>&, double);
template double clip_grad_norm(ParameterSet<double>&, double);

double LrSchedule::at(int step) const {
  const double t = total_steps > 0 ? std::clamp(static_cast<double>(step) / total_steps, 0.0, 1.0) : 0.0;
  switch (kind) {
    case Kind::kConstant:
      return peak;
    case Kind::kConstantThenDecay:
      if (t <= decay_start) return peak;
      return peak * std::max(0.0, (1.0 - t) / (1.0 - decay_start));
    case Kind::kOneCycle:
    default:
      if (warmup_fraction > 0.0 && t < warmup_fraction) return peak * (0.04 + 0.96 * t / warmup_fraction);
      return peak * std::max(1e-3, (1.0 - t) / (1.0 - warmup_fraction));
  }
}

namespace {

double sample_aepe(const Tensor<float>& flow, const Tensor<float>& gt, const Tensor<float>& valid) {
  double total = 0.0;
  int count = 0;
  for (int p = 0; p < gt.pixels(); ++p) {
    if (valid.mat()(0, p) == 0.0f) continue;
    total += (flow.mat().col(p) - gt.mat().col(p)).template cast<double>().norm();
    ++count;
  }
  return count ? total / count : 0.0;
}

// Position of the k-th drawn sample: epoch-wise permutations seeded by (seed, epoch).
int sample_index(std::uint64_t seed, long k, int n) {
  const long epoch = k / n;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(epoch), 0x5eedu};
  Rng rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order[k % n];
}

}  // namespace

double dataset_aepe(const CcmrModel<float>& model, const std::vector<SyntheticSample>& data,
                    const IterationSchedule& schedule, bool identical_frames) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& s : data) {
    Var<float> a(s.image1);
    Var<float> b(identical_frames ? s.image1 : s.image2);
    const auto est = estimate_flow(model, a, b, schedule);
    if (identical_frames) {
      total += sample_aepe(est.flow.value(), Tensor<float>::zeros_like(s.flow),
                           Tensor<float>::constant(1, s.flow.height(), s.flow.width(), 1.0f));
    } else {
      total += sample_aepe(est.flow.value(), s.flow, s.valid);
    }
  }
  return data.empty() ? 0.0 : total / data.size();
}

void train_toy(CcmrModel<float>& model, Adam<float>& optimizer, const std::vector<SyntheticSample>& data,
               const TrainConfig& config, TrainState& state, const std::function<void(const TrainRecord&)>& on_step) {
  if (data.empty()) throw ConfigError("train_toy: empty dataset");
  if (config.batch_size < 1) throw ConfigError("train_toy: batch_size must be >= 1");
  LossConfig loss_cfg = config.loss;
  loss_cfg.weights = make_loss_weights(config.schedule, config.loss_gamma);
  const int n = static_cast<int>(data.size());
  while (state.step < config.steps) {
    const int step = state.step + 1;
    model.parameters().zero_grad();
    double batch_loss = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& s = data[sample_index(config.seed, static_cast<long>(state.step) * config.batch_size + b, n)];
      Var<float> a(s.image1), c(s.image2);
      const auto est = estimate_flow(model, a, c, config.schedule);
      Var<float> loss = multiscale_loss(est.predictions, s.flow, s.valid, loss_cfg);
      const float value = loss.value()(0, 0, 0);
      if (!std::isfinite(value)) throw NumericError("loss became non-finite at step " + std::to_string(step));
      batch_loss += value;
      Tensor<float> seed = Tensor<float>::constant(1, 1, 1, 1.0f / config.batch_size);
      backward(loss, &seed);
    }
    TrainRecord rec;
    rec.step = step;
    rec.loss = batch_loss / config.batch_size;
    rec.lr = config.lr.at(state.step);
    rec.grad_norm = clip_grad_norm(model.parameters(), config.clip_norm);
    if (!std::isfinite(rec.grad_norm)) throw NumericError("gradient became non-finite at step " + std::to_string(step));
    optimizer.step(rec.lr);
    state.step = step;
    if (config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps)) {
      rec.aepe = dataset_aepe(model, data, config.schedule);
    }
    state.curve.push_back(rec);
    if (on_step) on_step(rec);
  }
}

}  // namespace ccmr
