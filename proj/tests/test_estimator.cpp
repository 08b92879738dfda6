#include <doctest.h>

#include <set>

#include "ccmr/estimator.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ccmr;
using namespace ccmr::test;

namespace {

ModelConfig tiny_config(int scales) {
  ModelConfig c = ModelConfig::toy();
  c.num_scales = scales;
  c.feature_dim = 6;
  c.hidden_dim = 4;
  c.context_dim = 4;
  c.motion_dim = 6;
  c.heads = 2;
  c.ffn_expansion = 1;
  c.corr_radius = 1;
  c.encoder_widths = {3, 4, 4, 5};
  c.consolidation_width = 4;
  c.head_width = 4;
  c.motion_corr_width = 4;
  c.motion_flow_width = 2;
  return c;
}

// Unit-norm, slowly varying features: <f(x), f(x)> = 1 beats every neighbour.
T smooth_unit_features(int c, int h, int w, Rng& rng) {
  std::uniform_real_distribution<double> freq(0.05, 0.3), phase(0.0, 6.28);
  T f(c, h, w);
  for (int k = 0; k < c; ++k) {
    const double a = freq(rng), b = freq(rng), p = phase(rng);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) f(k, y, x) = std::sin(a * x + b * y + p);
    }
  }
  for (int p = 0; p < f.pixels(); ++p) f.mat().col(p).normalize();
  return f;
}

}  // namespace

TEST_CASE("corr_lookup matches the dense cost volume sampled bilinearly") {
  Rng rng(1);
  std::uniform_int_distribution<int> side(3, 12);
  for (int pair = 0; pair < 24; ++pair) {
    const int h = side(rng), w = side(rng), c = 1 + pair % 7, r = 1 + pair % 4;
    const T f1 = randn(c, h, w, rng), f2 = randn(c, h, w, rng);
    const T flow = randu(2, h, w, rng, -4.0, 4.0);
    const T got = corr_lookup(V(f1), V(f2), V(flow), r).value();
    const T expect = oracle::CostVolume(f1, f2).lookup(flow, r);
    REQUIRE(got.same_shape(expect));
    CHECK(max_abs_diff(got.mat(), expect.mat()) < 1e-10);
  }
}

TEST_CASE("corr_lookup at zero flow peaks at the centre offset for identical features") {
  Rng rng(2);
  const T f = smooth_unit_features(8, 16, 16, rng);
  const int r = 3, side = 2 * r + 1;
  const T costs = corr_lookup(V(f), V(f), V(T(2, 16, 16)), r).value();
  int centred = 0;
  for (int p = 0; p < costs.pixels(); ++p) {
    Eigen::Index arg = 0;
    costs.mat().col(p).maxCoeff(&arg);
    centred += arg == r * side + r;
  }
  CHECK(centred == costs.pixels());
}

TEST_CASE("corr_lookup with zero target features is zero; shape errors") {
  Rng rng(3);
  const T costs = corr_lookup(V(randn(5, 6, 7, rng)), V(T(5, 6, 7)), V(randu(2, 6, 7, rng, -2, 2)), 2).value();
  CHECK(costs.channels() == 25);
  CHECK(costs.mat().isZero(0));
  CHECK_THROWS_AS(corr_lookup(V(randn(5, 6, 7, rng)), V(randn(4, 6, 7, rng)), V(T(2, 6, 7)), 2), ShapeError);
  CHECK_THROWS_AS(corr_lookup(V(randn(5, 6, 7, rng)), V(randn(5, 6, 7, rng)), V(T(3, 6, 7)), 2), ShapeError);
}

TEST_CASE("corr_lookup gradients") {
  Rng rng(4);
  const V f1 = leaf(randn(3, 5, 6, rng)), f2 = leaf(randn(3, 5, 6, rng)), flow = leaf(randu(2, 5, 6, rng, -2.3, 2.3));
  CHECK(check_gradients(project([&] { return corr_lookup(f1, f2, flow, 2); }), {f1, f2, flow}).max_rel < 1e-6);
}

TEST_CASE("convex upsampling: constants double, one-hot picks the parent, values stay in the hull") {
  Rng rng(5);
  const int h = 5, w = 4;
  const T constant = T::constant(2, h, w, 1.25);
  const T up = convex_upsample_x2(V(constant), V(randn(36, h, w, rng, 3.0))).value();
  CHECK(up.height() == 2 * h);
  CHECK(up.width() == 2 * w);
  CHECK((up.mat().array() == 2.5).all());

  const T flow = randn(2, h, w, rng);
  T one_hot = T::constant(36, h, w, -1e4);
  for (int sub = 0; sub < 4; ++sub) {
    for (int p = 0; p < h * w; ++p) one_hot.mat()(4 * 4 + sub, p) = 0.0;  // k = 4 is the centre
  }
  const T nearest = convex_upsample_x2(V(flow), V(one_hot)).value();
  for (int y = 0; y < 2 * h; ++y) {
    for (int x = 0; x < 2 * w; ++x) {
      for (int c = 0; c < 2; ++c) CHECK(nearest(c, y, x) == doctest::Approx(2 * flow(c, y / 2, x / 2)).epsilon(1e-12));
    }
  }

  const T mixed = convex_upsample_x2(V(flow), V(randn(36, h, w, rng, 2.0))).value();
  for (int y = 0; y < 2 * h; ++y) {
    for (int x = 0; x < 2 * w; ++x) {
      for (int c = 0; c < 2; ++c) {
        double lo = 1e300, hi = -1e300;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const double v = flow(c, std::clamp(y / 2 + dy, 0, h - 1), std::clamp(x / 2 + dx, 0, w - 1));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
        }
        CHECK(mixed(c, y, x) / 2 >= lo - 1e-12);
        CHECK(mixed(c, y, x) / 2 <= hi + 1e-12);
      }
    }
  }
  CHECK_THROWS_AS(convex_upsample_x2(V(flow), V(T(35, h, w))), ShapeError);
}

TEST_CASE("convex upsampling gradients") {
  Rng rng(6);
  const V flow = leaf(randn(2, 3, 4, rng)), mask = leaf(randn(36, 3, 4, rng));
  CHECK(check_gradients(project([&] { return convex_upsample_x2(flow, mask); }), {flow, mask}).max_rel < 1e-6);
}

TEST_CASE("motion encoder: zero inputs, output width, flow passthrough") {
  Rng rng(7);
  const ModelConfig c = tiny_config(3);
  ParameterSet<double> params;
  MotionEncoder<double> enc(params, "motion", c, rng);
  const T zero = encode_motion(enc, V(T(c.corr_channels(), 6, 5)), V(T(2, 6, 5))).value();
  CHECK(zero.channels() == c.motion_dim);
  CHECK(zero.mat().isZero(0));
  const T flow = randn(2, 6, 5, rng);
  const T mf = encode_motion(enc, V(randn(c.corr_channels(), 6, 5, rng)), V(flow)).value();
  CHECK(mf.mat().bottomRows(2) == flow.mat());
  CHECK((mf.mat().topRows(c.motion_dim - 2).array() >= 0).all());
  CHECK_THROWS_AS(encode_motion(enc, V(T(c.corr_channels(), 6, 5)), V(T(2, 6, 4))), ShapeError);
}

TEST_CASE("GRU update: bounded state, gates in (0, 1), deterministic, channel check") {
  Rng rng(8);
  const ModelConfig c = tiny_config(3);
  ParameterSet<double> params;
  UpdateBlock<double> block(params, "update", c, rng);
  const V hidden(randu(c.hidden_dim, 6, 6, rng, -0.99, 0.99));
  const V grouped(randn(c.motion_dim, 6, 6, rng)), context(randu(c.context_dim, 6, 6, rng, 0, 2)),
      motion(randn(c.motion_dim, 6, 6, rng));
  const auto out = gru_update(block, hidden, grouped, context, motion);
  CHECK((out.hidden.value().mat().array().abs() < 1.0).all());
  REQUIRE(out.gates.size() == 4);
  for (const auto& g : out.gates) {
    CHECK((g.value().mat().array() > 0.0).all());
    CHECK((g.value().mat().array() < 1.0).all());
  }
  CHECK(out.delta_flow.channels() == 2);
  CHECK(out.mask.channels() == 36);
  const auto again = gru_update(block, hidden, grouped, context, motion);
  CHECK(again.hidden.value().mat() == out.hidden.value().mat());
  CHECK(again.delta_flow.value().mat() == out.delta_flow.value().mat());
  CHECK_THROWS_AS(gru_update(block, hidden, grouped, V(randn(c.context_dim + 1, 6, 6, rng)), motion), ShapeError);
}

TEST_CASE("iteration schedules") {
  CHECK(IterationSchedule::preset("train", 4).iterations() == std::vector<int>{4, 5, 5, 6});
  CHECK(IterationSchedule::preset("train", 4).total() == 20);
  CHECK(IterationSchedule::preset("sintel", 4).iterations() == std::vector<int>{8, 10, 10, 10});
  CHECK(IterationSchedule::preset("kitti", 4).iterations() == std::vector<int>{35, 35, 5, 15});
  CHECK(IterationSchedule::preset("train", 3).iterations() == std::vector<int>{4, 5, 5});
  CHECK(IterationSchedule::preset("sintel", 3).iterations() == std::vector<int>{10, 15, 20});
  CHECK(IterationSchedule::preset("kitti", 3).iterations() == std::vector<int>{6, 18, 30});
  CHECK(IterationSchedule::parse("4,5,5,6").to_string() == "4,5,5,6");
  CHECK_THROWS_AS(IterationSchedule::parse("4,x"), ConfigError);
  CHECK_THROWS_AS(IterationSchedule::parse("4,0,1"), ConfigError);
  CHECK_THROWS_AS(IterationSchedule::preset("chairs", 4), ConfigError);
  CHECK_THROWS_AS(IterationSchedule::preset("train", 2), ConfigError);
}

TEST_CASE("estimate_flow runs the schedule coarse to fine") {
  Rng rng(9);
  const ModelConfig c = tiny_config(4);
  CcmrModel<double> model(c, 3);
  const V a(randu(3, 32, 32, rng, -1, 1)), b(randu(3, 32, 32, rng, -1, 1));
  const auto est = estimate_flow(model, a, b, IterationSchedule::preset("train", 4));
  CHECK(est.gru_invocations == 20);
  REQUIRE(est.predictions.size() == 20);
  for (const auto& p : est.predictions) {
    CHECK(p.channels() == 2);
    CHECK(p.height() == 32);
    CHECK(p.width() == 32);
  }
  CHECK(est.flow.value().mat() == est.predictions.back().value().mat());
  REQUIRE(est.trace.size() == 20);
  const int expect_scale[] = {0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3};
  for (int i = 0; i < 20; ++i) CHECK(est.trace[i].scale == expect_scale[i]);

  for (int s = 0; s < 4; ++s) CHECK(est.scale_inits[s].height() == 32 / c.scale_factor(s));
  CHECK(est.scale_inits[0].value().mat().isZero(0));
  for (int s = 0; s + 1 < 4; ++s) {
    const T chained = convex_upsample_x2(est.scale_finals[s], est.scale_masks[s]).value();
    CHECK(chained.mat() == est.scale_inits[s + 1].value().mat());
  }

  CHECK_THROWS_AS(estimate_flow(model, a, b, IterationSchedule({1, 1, 1})), ConfigError);
}

TEST_CASE("three-scale model: one prediction per scale at full resolution") {
  Rng rng(10);
  CcmrModel<double> model(tiny_config(3), 4);
  const V a(randu(3, 32, 48, rng, -1, 1)), b(randu(3, 32, 48, rng, -1, 1));
  const auto est = estimate_flow(model, a, b, IterationSchedule({1, 1, 1}));
  REQUIRE(est.predictions.size() == 3);
  for (const auto& p : est.predictions) {
    CHECK(p.height() == 32);
    CHECK(p.width() == 48);
  }
  CHECK(est.scale_finals.back().height() == 8);
}

TEST_CASE("motion encoder and update block are shared; attention is per scale") {
  Rng rng(11);
  CcmrModel<double> model(tiny_config(4), 5);
  const V a(randu(3, 32, 32, rng, -1, 1)), b(randu(3, 32, 32, rng, -1, 1));
  const auto est = estimate_flow(model, a, b, IterationSchedule({2, 1, 1, 2}));
  std::set<const void*> encoders, blocks, contexts, groupings;
  for (const auto& t : est.trace) {
    encoders.insert(t.motion_encoder);
    blocks.insert(t.update_block);
    contexts.insert(t.global_context);
    groupings.insert(t.motion_grouping);
    CHECK(t.global_context == &model.global_context[t.scale]);
  }
  CHECK(encoders.size() == 1);
  CHECK(blocks.size() == 1);
  CHECK(contexts.size() == 4);
  CHECK(groupings.size() == 4);

  int update_params = 0, scale0_params = 0;
  for (const auto& p : model.parameters().entries()) {
    update_params += p.name.rfind("update.", 0) == 0;
    scale0_params += p.name.rfind("global_context.s0.", 0) == 0;
  }
  CHECK(update_params == 10 * 2);  // ten convolutions, weight and bias each, one copy
  CHECK(scale0_params > 0);
}

TEST_CASE("end-to-end gradients through the coarse-to-fine chain") {
  Rng rng(12);
  ModelConfig c = tiny_config(3);
  c.detach_flow = false;
  c.layer_scale_init = 0.5;
  CcmrModel<double> model(c, 6);
  const V a(randu(3, 16, 16, rng, -1, 1)), b(randu(3, 16, 16, rng, -1, 1));
  const IterationSchedule schedule({1, 1, 1});
  std::vector<V> inputs;
  for (const char* prefix : {"image_encoder.", "context_encoder.", "global_context.s1.", "motion_grouping.s2.",
                             "motion_encoder.", "update.gru.", "update.mask_head."}) {
    for (const auto& p : model.parameters().entries()) {
      if (p.name.rfind(prefix, 0) == 0 && p.var.value().size() > 1) {
        inputs.push_back(p.var);
        break;
      }
    }
  }
  REQUIRE(inputs.size() == 7);
  const auto loss = project([&] { return estimate_flow(model, a, b, schedule).flow; });
  const GradCheck g = check_gradients(loss, inputs, 1e-6, 1e-8, 12);
  int expected = 0;
  for (const auto& in : inputs) expected += std::min<int>(12, static_cast<int>(in.value().size()));
  CHECK(g.checked == expected);
  CHECK(g.max_rel < 1e-3);
  for (const auto& in : inputs) CHECK(in.grad().mat().norm() > 0.0);  // every module is on the path
}
