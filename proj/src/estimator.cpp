#include "ccmr/estimator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

namespace ccmr {

template <typename Scalar>
Var<Scalar> corr_lookup(const Var<Scalar>& features1, const Var<Scalar>& features2, const Var<Scalar>& flow,
                        int radius) {
  require_same_shape(features1.value(), features2.value(), "corr_lookup features");
  require_same_spatial(features1.value(), flow.value(), "corr_lookup flow");
  if (flow.channels() != 2) throw ShapeError("corr_lookup: flow must have 2 channels");
  if (radius < 1) throw ConfigError("corr_lookup: radius must be >= 1");

  const int h = features1.height(), w = features1.width();
  const int span = 2 * radius + 1;   // offsets per axis
  const int window = 2 * radius + 2; // integer taps per axis
  const Scalar norm = Scalar(1) / std::sqrt(Scalar(features1.channels()));
  const MatrixX<Scalar>& f1 = features1.value().mat();
  const MatrixX<Scalar>& f2 = features2.value().mat();
  const MatrixX<Scalar>& uv = flow.value().mat();

  struct PixelTap {
    int x0, y0;
    Scalar fx, fy;
  };
  std::vector<PixelTap> taps(static_cast<std::size_t>(h) * w);
  // Raw dot products over the (window x window) integer neighbourhood.
  MatrixX<Scalar> dots = MatrixX<Scalar>::Zero(window * window, static_cast<Eigen::Index>(h) * w);
  Tensor<Scalar> out(span * span, h, w);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      const Scalar px = Scalar(x) + uv(0, p);
      const Scalar py = Scalar(y) + uv(1, p);
      const Scalar fx0 = std::floor(px), fy0 = std::floor(py);
      PixelTap& t = taps[p];
      t.x0 = static_cast<int>(fx0) - radius;
      t.y0 = static_cast<int>(fy0) - radius;
      t.fx = px - fx0;
      t.fy = py - fy0;
      for (int j = 0; j < window; ++j) {
        const int yy = t.y0 + j;
        if (yy < 0 || yy >= h) continue;
        for (int i = 0; i < window; ++i) {
          const int xx = t.x0 + i;
          if (xx < 0 || xx >= w) continue;
          dots(j * window + i, p) = f1.col(p).dot(f2.col(yy * w + xx));
        }
      }
      const Scalar w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx, w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
      for (int dy = 0; dy < span; ++dy) {
        for (int dx = 0; dx < span; ++dx) {
          const int a = dy * window + dx;
          out.mat()(dy * span + dx, p) =
              norm * (w00 * dots(a, p) + w01 * dots(a + 1, p) + w10 * dots(a + window, p) + w11 * dots(a + window + 1, p));
        }
      }
    }
  }

  return record<Scalar>(std::move(out), {features1, features2, flow},
                        [taps = std::move(taps), dots = std::move(dots), h, w, span, window, norm](Node<Scalar>& self) {
                          const MatrixX<Scalar>& g = self.grad.mat();
                          const MatrixX<Scalar>& f1 = self.parent_value(0).mat();
                          const MatrixX<Scalar>& f2 = self.parent_value(1).mat();
                          const bool need_f1 = self.parent_needs_grad(0), need_f2 = self.parent_needs_grad(1),
                                     need_flow = self.parent_needs_grad(2);
                          VectorX<Scalar> d_dots(window * window);
                          for (int p = 0; p < h * w; ++p) {
                            const PixelTap& t = taps[p];
                            const Scalar w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx,
                                         w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
                            d_dots.setZero();
                            Scalar d_fx = 0, d_fy = 0;
                            for (int dy = 0; dy < span; ++dy) {
                              for (int dx = 0; dx < span; ++dx) {
                                const Scalar gd = norm * g(dy * span + dx, p);
                                if (gd == Scalar(0)) continue;
                                const int a = dy * window + dx;
                                d_dots(a) += w00 * gd;
                                d_dots(a + 1) += w01 * gd;
                                d_dots(a + window) += w10 * gd;
                                d_dots(a + window + 1) += w11 * gd;
                                const Scalar d00 = dots(a, p), d01 = dots(a + 1, p), d10 = dots(a + window, p),
                                             d11 = dots(a + window + 1, p);
                                d_fx += gd * ((1 - t.fy) * (d01 - d00) + t.fy * (d11 - d10));
                                d_fy += gd * ((1 - t.fx) * (d10 - d00) + t.fx * (d11 - d01));
                              }
                            }
                            if (need_flow) {
                              self.parent_grad(2)(0, p) += d_fx;
                              self.parent_grad(2)(1, p) += d_fy;
                            }
                            if (!need_f1 && !need_f2) continue;
                            for (int j = 0; j < window; ++j) {
                              const int yy = t.y0 + j;
                              if (yy < 0 || yy >= h) continue;
                              for (int i = 0; i < window; ++i) {
                                const int xx = t.x0 + i;
                                if (xx < 0 || xx >= w) continue;
                                const Scalar dd = d_dots(j * window + i);
                                if (dd == Scalar(0)) continue;
                                if (need_f1) self.parent_grad(0).col(p) += dd * f2.col(yy * w + xx);
                                if (need_f2) self.parent_grad(1).col(yy * w + xx) += dd * f1.col(p);
                              }
                            }
                          }
                        });
}

template <typename Scalar>
Var<Scalar> convex_upsample_x2(const Var<Scalar>& flow, const Var<Scalar>& mask) {
  require_same_spatial(flow.value(), mask.value(), "convex_upsample_x2");
  if (mask.channels() != 36) throw ShapeError("convex_upsample_x2: mask needs 36 channels, got " + std::to_string(mask.channels()));
  const int channels = flow.channels(), h = flow.height(), w = flow.width();
  const MatrixX<Scalar>& f = flow.value().mat();
  const MatrixX<Scalar>& logits = mask.value().mat();

  // weights(k * 4 + sub, p): softmax over k.
  MatrixX<Scalar> weights(36, static_cast<Eigen::Index>(h) * w);
  std::vector<std::array<int, 9>> neighbours(static_cast<std::size_t>(h) * w);
  Tensor<Scalar> out(channels, 2 * h, 2 * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      for (int k = 0; k < 9; ++k) {
        const int yy = std::clamp(y + k / 3 - 1, 0, h - 1);
        const int xx = std::clamp(x + k % 3 - 1, 0, w - 1);
        neighbours[p][k] = yy * w + xx;
      }
      for (int sub = 0; sub < 4; ++sub) {
        Scalar top = logits(sub, p);
        for (int k = 1; k < 9; ++k) top = std::max(top, logits(k * 4 + sub, p));
        Scalar total = 0;
        for (int k = 0; k < 9; ++k) {
          weights(k * 4 + sub, p) = std::exp(logits(k * 4 + sub, p) - top);
          total += weights(k * 4 + sub, p);
        }
        for (int k = 0; k < 9; ++k) weights(k * 4 + sub, p) /= total;
        const int oy = 2 * y + sub / 2, ox = 2 * x + sub % 2;
        // Written relative to the centre so equal neighbours reproduce it exactly.
        auto dst = out.mat().col(oy * 2 * w + ox);
        const auto centre = f.col(neighbours[p][4]);
        dst = centre;
        for (int k = 0; k < 9; ++k) {
          if (k != 4) dst += weights(k * 4 + sub, p) * (f.col(neighbours[p][k]) - centre);
        }
        dst *= Scalar(2);
      }
    }
  }
  return record<Scalar>(
      std::move(out), {flow, mask},
      [weights = std::move(weights), neighbours = std::move(neighbours), h, w](Node<Scalar>& self) {
        const MatrixX<Scalar>& g = self.grad.mat();
        const MatrixX<Scalar>& f = self.parent_value(0).mat();
        const bool need_flow = self.parent_needs_grad(0), need_mask = self.parent_needs_grad(1);
        for (int p = 0; p < h * w; ++p) {
          const int y = p / w, x = p % w;
          for (int sub = 0; sub < 4; ++sub) {
            const int oy = 2 * y + sub / 2, ox = 2 * x + sub % 2;
            const auto go = g.col(oy * 2 * w + ox);
            std::array<Scalar, 9> d_w{};
            Scalar inner = 0;
            for (int k = 0; k < 9; ++k) {
              const Scalar wk = weights(k * 4 + sub, p);
              if (need_flow) self.parent_grad(0).col(neighbours[p][k]) += Scalar(2) * wk * go;
              d_w[k] = Scalar(2) * go.dot(f.col(neighbours[p][k]));
              inner += wk * d_w[k];
            }
            if (need_mask) {
              for (int k = 0; k < 9; ++k) {
                self.parent_grad(1)(k * 4 + sub, p) += weights(k * 4 + sub, p) * (d_w[k] - inner);
              }
            }
          }
        }
      });
}

template <typename Scalar>
MotionEncoder<Scalar>::MotionEncoder(ParameterSet<Scalar>& params, const std::string& name, const ModelConfig& config,
                                     Rng& rng) {
  const int c1 = config.motion_corr_width, c2 = std::max(1, config.motion_corr_width * 3 / 4);
  const int f1 = config.motion_flow_width, f2 = std::max(1, config.motion_flow_width / 2);
  corr1_ = Conv2d<Scalar>(params, name + ".corr1", config.corr_channels(), c1, 1, 1, rng, kReluGain);
  corr2_ = Conv2d<Scalar>(params, name + ".corr2", c1, c2, 3, 1, rng, kReluGain);
  flow1_ = Conv2d<Scalar>(params, name + ".flow1", 2, f1, 7, 1, rng, kReluGain);
  flow2_ = Conv2d<Scalar>(params, name + ".flow2", f1, f2, 3, 1, rng, kReluGain);
  fuse_ = Conv2d<Scalar>(params, name + ".fuse", c2 + f2, config.motion_dim - 2, 3, 1, rng, kReluGain);
}

template <typename Scalar>
Var<Scalar> MotionEncoder<Scalar>::operator()(const Var<Scalar>& costs, const Var<Scalar>& flow) const {
  require_same_spatial(costs.value(), flow.value(), "encode_motion");
  Var<Scalar> c = relu(corr2_(relu(corr1_(costs))));
  Var<Scalar> f = relu(flow2_(relu(flow1_(flow))));
  Var<Scalar> fused = relu(fuse_(concat_channels<Scalar>({c, f})));
  return concat_channels<Scalar>({fused, flow});
}

template <typename Scalar>
UpdateBlock<Scalar>::UpdateBlock(ParameterSet<Scalar>& params, const std::string& name, const ModelConfig& config,
                                 Rng& rng)
    : input_channels_(2 * config.motion_dim + config.context_dim) {
  const int hid = config.hidden_dim, in = hid + input_channels_;
  z1_ = Conv2d<Scalar>(params, name + ".gru.convz1", in, hid, 1, 5, 1, rng);
  r1_ = Conv2d<Scalar>(params, name + ".gru.convr1", in, hid, 1, 5, 1, rng);
  q1_ = Conv2d<Scalar>(params, name + ".gru.convq1", in, hid, 1, 5, 1, rng);
  z2_ = Conv2d<Scalar>(params, name + ".gru.convz2", in, hid, 5, 1, 1, rng);
  r2_ = Conv2d<Scalar>(params, name + ".gru.convr2", in, hid, 5, 1, 1, rng);
  q2_ = Conv2d<Scalar>(params, name + ".gru.convq2", in, hid, 5, 1, 1, rng);
  flow1_ = Conv2d<Scalar>(params, name + ".flow_head.conv1", hid, config.head_width, 3, 1, rng, kReluGain);
  flow2_ = Conv2d<Scalar>(params, name + ".flow_head.conv2", config.head_width, 2, 3, 1, rng, 0.1);
  mask1_ = Conv2d<Scalar>(params, name + ".mask_head.conv1", hid, config.head_width, 3, 1, rng, kReluGain);
  mask2_ = Conv2d<Scalar>(params, name + ".mask_head.conv2", config.head_width, 36, 1, 1, rng);
}

template <typename Scalar>
Var<Scalar> UpdateBlock<Scalar>::mask_head(const Var<Scalar>& hidden) const {
  return scale(mask2_(relu(mask1_(hidden))), Scalar(0.25));
}

template <typename Scalar>
GruOutput<Scalar> UpdateBlock<Scalar>::operator()(const Var<Scalar>& hidden, const Var<Scalar>& inputs) const {
  if (inputs.channels() != input_channels_) {
    throw ShapeError("gru_update: expected " + std::to_string(input_channels_) + " input channels, got " +
                     std::to_string(inputs.channels()));
  }
  require_same_spatial(hidden.value(), inputs.value(), "gru_update");
  GruOutput<Scalar> out;
  Var<Scalar> h = hidden;
  const auto pass = [&](const Conv2d<Scalar>& cz, const Conv2d<Scalar>& cr, const Conv2d<Scalar>& cq) {
    Var<Scalar> hx = concat_channels<Scalar>({h, inputs});
    Var<Scalar> z = sigmoid(cz(hx));
    Var<Scalar> r = sigmoid(cr(hx));
    Var<Scalar> q = tanh(cq(concat_channels<Scalar>({r * h, inputs})));
    h = one_minus(z) * h + z * q;
    out.gates.push_back(z);
    out.gates.push_back(r);
  };
  pass(z1_, r1_, q1_);
  pass(z2_, r2_, q2_);
  out.hidden = h;
  out.delta_flow = flow2_(relu(flow1_(h)));
  out.mask = mask_head(h);
  return out;
}

template <typename Scalar>
GruOutput<Scalar> gru_update(const UpdateBlock<Scalar>& block, const Var<Scalar>& hidden,
                             const Var<Scalar>& grouped_motion, const Var<Scalar>& context, const Var<Scalar>& motion) {
  return block(hidden, concat_channels<Scalar>({grouped_motion, context, motion}));
}

IterationSchedule::IterationSchedule(std::vector<int> iterations) : iterations_(std::move(iterations)) {
  if (iterations_.empty()) throw ConfigError("iteration schedule is empty");
  for (int t : iterations_) {
    if (t < 1) throw ConfigError("iteration schedule entries must be >= 1, got " + std::to_string(t));
  }
}

IterationSchedule IterationSchedule::preset(const std::string& name, int num_scales) {
  if (num_scales != 3 && num_scales != 4) throw ConfigError("presets exist for 3 or 4 scales");
  const bool four = num_scales == 4;
  if (name == "train") return IterationSchedule(four ? std::vector<int>{4, 5, 5, 6} : std::vector<int>{4, 5, 5});
  if (name == "sintel") return IterationSchedule(four ? std::vector<int>{8, 10, 10, 10} : std::vector<int>{10, 15, 20});
  if (name == "kitti") return IterationSchedule(four ? std::vector<int>{35, 35, 5, 15} : std::vector<int>{6, 18, 30});
  throw ConfigError("unknown schedule preset '" + name + "' (train, sintel, kitti)");
}

IterationSchedule IterationSchedule::parse(const std::string& text) {
  std::vector<int> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad iteration count '" + item + "' in '" + text + "'");
    }
  }
  return IterationSchedule(std::move(values));
}

int IterationSchedule::total() const {
  int n = 0;
  for (int t : iterations_) n += t;
  return n;
}

std::string IterationSchedule::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < iterations_.size(); ++i) s += (i ? "," : "") + std::to_string(iterations_[i]);
  return s;
}

template <typename Scalar>
CcmrModel<Scalar>::CcmrModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  image_encoder = PyramidEncoder<Scalar>(params_, "image_encoder", config_, config_.feature_dim,
                                         config_.consolidation_width, rng);
  context_encoder = PyramidEncoder<Scalar>(params_, "context_encoder", config_, config_.context_width(),
                                           std::max(1, config_.consolidation_width / 2), rng);
  for (int s = 0; s < config_.num_scales; ++s) {
    global_context.push_back(XcitBlockParams<Scalar>::make_self(params_, "global_context.s" + std::to_string(s),
                                                                config_.context_dim, config_.heads,
                                                                config_.ffn_expansion, config_.layer_scale_init, rng));
  }
  for (int s = 0; s < config_.num_scales; ++s) {
    motion_grouping.push_back(XcitBlockParams<Scalar>::make_cross(
        params_, "motion_grouping.s" + std::to_string(s), config_.context_dim, config_.motion_dim, config_.heads,
        config_.ffn_expansion, config_.layer_scale_init, rng));
  }
  motion_encoder = MotionEncoder<Scalar>(params_, "motion_encoder", config_, rng);
  update_block = UpdateBlock<Scalar>(params_, "update", config_, rng);
}

template <typename Scalar>
ContextOutputs<Scalar> compute_context(const CcmrModel<Scalar>& model, const Var<Scalar>& image1) {
  ContextOutputs<Scalar> out;
  out.context = extract_context(image1, model.context_encoder, model.config().hidden_dim);
  for (int s = 0; s < out.context.num_scales(); ++s) {
    out.global_context.push_back(global_context_block(out.context[s].context, model.global_context[s]));
  }
  return out;
}

namespace {

// Full-resolution version of a scale-s estimate for supervision and output.
template <typename Scalar>
Var<Scalar> to_full_resolution(const CcmrModel<Scalar>& model, const Var<Scalar>& flow, const Var<Scalar>& mask,
                               const Var<Scalar>& hidden, int s) {
  const ModelConfig& cfg = model.config();
  Var<Scalar> up = convex_upsample_x2(flow, mask);
  int remaining = cfg.scale_factor(s) / 2;
  const bool finest = s == cfg.num_scales - 1;
  if (finest && remaining == 2) {
    // 3-scale model: second shared x2 convex step, mask from the x2 hidden state.
    up = convex_upsample_x2(up, model.update_block.mask_head(upsample_bilinear(hidden, 2)));
    remaining = 1;
  }
  if (remaining > 1) up = upsample_bilinear(up, remaining, Scalar(remaining));
  return up;
}

}  // namespace

template <typename Scalar>
FlowEstimate<Scalar> estimate_flow(const CcmrModel<Scalar>& model, const Var<Scalar>& image1, const Var<Scalar>& image2,
                                   const IterationSchedule& schedule) {
  const ModelConfig& cfg = model.config();
  if (schedule.num_scales() != cfg.num_scales) {
    throw ConfigError("schedule has " + std::to_string(schedule.num_scales()) + " entries for a " +
                      std::to_string(cfg.num_scales) + "-scale model");
  }
  require_same_shape(image1.value(), image2.value(), "estimate_flow images");

  const FeaturePyramid<Scalar> f1 = extract_image_features(image1, model.image_encoder);
  const FeaturePyramid<Scalar> f2 = extract_image_features(image2, model.image_encoder);
  const ContextOutputs<Scalar> ctx = compute_context(model, image1);

  FlowEstimate<Scalar> est;
  Var<Scalar> flow(Tensor<Scalar>(2, f1[0].height(), f1[0].width()));
  Var<Scalar> mask;
  for (int s = 0; s < cfg.num_scales; ++s) {
    if (s > 0) flow = convex_upsample_x2(flow, mask);
    est.scale_inits.push_back(flow);
    Var<Scalar> hidden = ctx.context[s].hidden;
    for (int t = 0; t < schedule[s]; ++t) {
      Var<Scalar> flow_in = cfg.detach_flow ? detach(flow) : flow;
      Var<Scalar> costs = corr_lookup(f1[s], f2[s], flow_in, cfg.corr_radius);
      Var<Scalar> motion = encode_motion(model.motion_encoder, costs, flow_in);
      Var<Scalar> grouped = cross_motion_grouping(ctx.global_context[s], motion, model.motion_grouping[s]);
      GruOutput<Scalar> update = gru_update(model.update_block, hidden, grouped, ctx.context[s].context, motion);
      ++est.gru_invocations;
      est.trace.push_back({s, &model.motion_encoder, &model.update_block, &model.global_context[s],
                           &model.motion_grouping[s]});
      hidden = update.hidden;
      flow = flow_in + update.delta_flow;
      mask = update.mask;
      est.predictions.push_back(to_full_resolution(model, flow, mask, hidden, s));
    }
    est.scale_finals.push_back(flow);
    est.scale_masks.push_back(mask);
  }
  est.flow = est.predictions.back();
  return est;
}

#define CCMR_INSTANTIATE_ESTIMATOR(S)                                                                           \
  template Var<S> corr_lookup(const Var<S>&, const Var<S>&, const Var<S>&, int);                                \
  template Var<S> convex_upsample_x2(const Var<S>&, const Var<S>&);                                             \
  template class MotionEncoder<S>;                                                                              \
  template class UpdateBlock<S>;                                                                                \
  template GruOutput<S> gru_update(const UpdateBlock<S>&, const Var<S>&, const Var<S>&, const Var<S>&,          \
                                   const Var<S>&);                                                              \
  template class CcmrModel<S>;                                                                                  \
  template ContextOutputs<S> compute_context(const CcmrModel<S>&, const Var<S>&);                               \
  template FlowEstimate<S> estimate_flow(const CcmrModel<S>&, const Var<S>&, const Var<S>&,                     \
                                         const IterationSchedule&);

CCMR_INSTANTIATE_ESTIMATOR(float)
CCMR_INSTANTIATE_ESTIMATOR(double)

}  // namespace ccmr
