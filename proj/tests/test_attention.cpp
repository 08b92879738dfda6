#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "ccmr/attention.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ccmr;
using namespace ccmr::test;

namespace {

VectorX<double> temperatures(int heads, Rng& rng) {
  std::uniform_real_distribution<double> dist(0.3, 2.0);
  VectorX<double> t(heads);
  for (int h = 0; h < heads; ++h) t(h) = dist(rng);
  return t;
}

double max_grid_diff(const oracle::Grid& g, const Tensor<double>& t) {
  double m = 0.0;
  const auto tokens = oracle::tokens_of(t);
  for (std::size_t n = 0; n < g.size(); ++n) {
    for (std::size_t c = 0; c < g[n].size(); ++c) m = std::max(m, std::abs(g[n][c] - tokens[n][c]));
  }
  return m;
}

struct SelfBlock {
  ParameterSet<double> params;
  XcitBlockParams<double> block;
};

std::unique_ptr<SelfBlock> make_self_block(int d, int heads, Rng& rng) {
  auto b = std::make_unique<SelfBlock>();
  b->block = XcitBlockParams<double>::make_self(b->params, "gc", d, heads, 2, 0.5, rng);
  randomize(b->params, rng);
  return b;
}

std::unique_ptr<SelfBlock> make_cross_block(int d, int motion, int heads, Rng& rng) {
  auto b = std::make_unique<SelfBlock>();
  b->block = XcitBlockParams<double>::make_cross(b->params, "mg", d, motion, heads, 2, 0.5, rng);
  randomize(b->params, rng);
  return b;
}

void zero_gammas(XcitBlockParams<double>& p) {
  for (V g : {p.gamma1, p.gamma2, p.gamma3}) g.mutable_value().mat().setZero();
}

}  // namespace

TEST_CASE("positional embedding: deterministic, additive, odd width rejected") {
  Rng rng(1);
  const V x(randn(8, 5, 6, rng));
  const auto a = positional_embed(x).value();
  const auto b = positional_embed(x).value();
  CHECK(a.mat() == b.mat());
  const V zero(T(8, 5, 6));
  CHECK(positional_embed(zero).value().mat() == sinusoidal_embedding<double>(8, 5, 6).mat());
  CHECK_THROWS_AS(sinusoidal_embedding<double>(7, 4, 4), ConfigError);
}

TEST_CASE("positional embedding: no two positions collide up to 64x64") {
  for (int channels : {4, 8, 16}) {
    const auto pe = sinusoidal_embedding<double>(channels, 64, 64);
    std::set<std::vector<double>> seen;
    for (int p = 0; p < pe.pixels(); ++p) {
      seen.insert(std::vector<double>(pe.mat().col(p).data(), pe.mat().col(p).data() + channels));
    }
    CHECK(seen.size() == static_cast<std::size_t>(pe.pixels()));
  }
}

TEST_CASE("kqv_project: identity weights, zero input, head blocks are channel slices") {
  Rng rng(2);
  ParameterSet<double> params;
  Conv2d<double> k(params, "k", 8, 8, 1, 1, rng), q(params, "q", 8, 8, 1, 1, rng), v(params, "v", 8, 8, 1, 1, rng);
  const V x(randn(8, 3, 3, rng));

  SUBCASE("identity") {
    for (V w : {k.weight, q.weight, v.weight}) w.mutable_value().mat() = MatrixX<double>::Identity(8, 8);
    const auto kqv = kqv_project(x, k, q, v, 1);
    CHECK(kqv.key.value().mat() == x.value().mat());
    CHECK(kqv.query.value().mat() == x.value().mat());
    CHECK(kqv.value.value().mat() == x.value().mat());
  }
  SUBCASE("zero input") {
    const auto kqv = kqv_project(V(T(8, 3, 3)), k, q, v, 4);
    CHECK(kqv.key.value().mat().isZero(0));
    CHECK(kqv.value.value().mat().isZero(0));
  }
  SUBCASE("heads") {
    const auto kqv = kqv_project(x, k, q, v, 4);
    // Direct oracle: x W^T with W read from the weight tensor, sliced per head.
    const MatrixX<double> W = k.weight.value().mat();  // 8 x 8
    const MatrixX<double> full = x.value().mat().transpose() * W.transpose();
    for (int h = 0; h < 4; ++h) {
      CHECK(max_abs_diff(head_block(kqv.key.value(), h, 4), full.middleCols(2 * h, 2)) < 1e-12);
    }
  }
  CHECK_THROWS_AS(kqv_project(x, k, q, v, 3), ConfigError);
}

TEST_CASE("xca matches the scalar oracle and is column-stochastic") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const int heads = std::vector<int>{1, 2, 4}[trial % 3];
    const int d = heads * (1 + trial % 2 + 1);
    const int n = 1 + trial % 16;
    const T K = randn(d, 1, n, rng), Q = randn(d, 1, n, rng), Vt = randn(d, 1, n, rng);
    const auto tau = temperatures(heads, rng);
    const auto fwd = xca_forward(K, Q, Vt, tau, heads);
    std::vector<oracle::Grid> attention;
    const auto expect = oracle::xca(oracle::tokens_of(K), oracle::tokens_of(Q), oracle::tokens_of(Vt),
                                    std::vector<double>(tau.data(), tau.data() + heads), heads, &attention);
    CHECK(max_grid_diff(expect, fwd.output) < 1e-10);
    REQUIRE(fwd.attention.size() == static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      CHECK(fwd.attention[h].rows() == d / heads);
      CHECK((fwd.attention[h].colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("xca hand instance: N = 3, d = 2, h = 1") {
  // Integer K, Q, V; tau = 1.
  T K(2, 1, 3), Q(2, 1, 3), Vt(2, 1, 3);
  const double k[3][2] = {{1, 0}, {2, 1}, {0, 2}};
  const double q[3][2] = {{1, 1}, {0, 1}, {1, 0}};
  const double v[3][2] = {{1, 2}, {3, 4}, {5, 6}};
  for (int n = 0; n < 3; ++n) {
    for (int c = 0; c < 2; ++c) {
      K(c, 0, n) = k[n][c];
      Q(c, 0, n) = q[n][c];
      Vt(c, 0, n) = v[n][c];
    }
  }
  // Column norms: K: sqrt(5), sqrt(5); Q: sqrt(2), sqrt(2).
  // Khat^T Qhat = [[1, 3], [2, 1]] / sqrt(10).
  const double s = std::sqrt(10.0);
  const double l00 = 1 / s, l01 = 3 / s, l10 = 2 / s, l11 = 1 / s;
  const double a00 = std::exp(l00) / (std::exp(l00) + std::exp(l10)), a10 = 1 - a00;
  const double a01 = std::exp(l01) / (std::exp(l01) + std::exp(l11)), a11 = 1 - a01;
  VectorX<double> tau(1);
  tau << 1.0;
  const auto out = xca_forward(K, Q, Vt, tau, 1).output;
  for (int n = 0; n < 3; ++n) {
    CHECK(out(0, 0, n) == doctest::Approx(v[n][0] * a00 + v[n][1] * a10).epsilon(1e-14));
    CHECK(out(1, 0, n) == doctest::Approx(v[n][0] * a01 + v[n][1] * a11).epsilon(1e-14));
  }
}

TEST_CASE("xca degenerate and symmetry cases") {
  Rng rng(4);
  const T K = randn(8, 3, 4, rng), Q = randn(8, 3, 4, rng), Vt = randn(8, 3, 4, rng);
  const auto tau = temperatures(8, rng);

  SUBCASE("one channel per head returns V") {
    CHECK(xca_forward(K, Q, Vt, tau, 8).output.mat() == Vt.mat());
  }
  SUBCASE("zero keys use the norm floor instead of dividing by zero") {
    const auto out = xca_forward(T(8, 3, 4), Q, Vt, temperatures(2, rng), 2).output;
    CHECK(out.mat().allFinite());
  }
  SUBCASE("token permutation permutes the output") {
    std::vector<int> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto permute = [&](const T& x) {
      T y = x;
      for (int p = 0; p < 12; ++p) y.mat().col(p) = x.mat().col(perm[p]);
      return y;
    };
    const auto t2 = temperatures(2, rng);
    const auto a = xca_forward(K, Q, Vt, t2, 2);
    const auto b = xca_forward(permute(K), permute(Q), permute(Vt), t2, 2);
    CHECK(max_abs_diff(permute(a.output).mat(), b.output.mat()) < 1e-12);
    CHECK(max_abs_diff(a.attention[0], b.attention[0]) < 1e-12);
  }
  SUBCASE("attention size does not depend on the token count") {
    const T K4 = randn(8, 6, 8, rng), Q4 = randn(8, 6, 8, rng), V4 = randn(8, 6, 8, rng);
    const auto t2 = temperatures(2, rng);
    const auto small = xca_forward(K, Q, Vt, t2, 2);
    const auto large = xca_forward(K4, Q4, V4, t2, 2);
    for (int h = 0; h < 2; ++h) CHECK(small.attention[h].size() == large.attention[h].size());
    CHECK(large.attention[0].size() == 16);
  }
}

TEST_CASE("xca gradients match finite differences") {
  Rng rng(5);
  for (int heads : {1, 2, 4}) {
    const V K = leaf(randn(8, 2, 3, rng)), Q = leaf(randn(8, 2, 3, rng)), Vv = leaf(randn(8, 2, 3, rng));
    const V logt = leaf(randn(heads, 1, 1, rng, 0.3));
    const auto f = project([&] { return xca(K, Q, Vv, logt, heads); });
    const auto r = check_gradients(f, {K, Q, Vv, logt});
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("lpi: receptive field, zero input, depth-wise") {
  Rng rng(6);
  ParameterSet<double> params;
  auto p = LpiParams<double>::make(params, "lpi", 4, rng);
  SUBCASE("zero input with zero biases") {
    CHECK(lpi(V(T(4, 7, 7)), p).value().mat().isZero(0));
  }
  randomize(params, rng);
  SUBCASE("impulse stays inside the 5x5 window") {
    // Subtract the response to zero input so biases do not count as support.
    T impulse(4, 11, 11);
    impulse(2, 5, 5) = 1.0;
    const T base = lpi(V(T(4, 11, 11)), p).value();
    const T out = lpi(V(impulse), p).value();
    for (int c = 0; c < 4; ++c) {
      for (int y = 0; y < 11; ++y) {
        for (int x = 0; x < 11; ++x) {
          const bool inside = std::abs(y - 5) <= 2 && std::abs(x - 5) <= 2;
          if (!inside) CHECK(out(c, y, x) == base(c, y, x));
          if (c != 2) CHECK(out(c, y, x) == base(c, y, x));
        }
      }
    }
  }
  SUBCASE("zeroing a channel zeroes that output channel (zero biases)") {
    for (V b : {p.dw1_bias, p.dw2_bias, p.norm_shift}) b.mutable_value().mat().setZero();
    T x = randn(4, 6, 6, rng);
    x.mat().row(1).setZero();
    CHECK(lpi(V(x), p).value().mat().row(1).isZero(0));
  }
  SUBCASE("gradients") {
    const V x = leaf(randn(4, 4, 4, rng));
    const auto r = check_gradients(project([&] { return lpi(x, p); }), {x, p.dw1_weight, p.dw1_bias, p.norm_gain,
                                                                        p.norm_shift, p.dw2_weight, p.dw2_bias});
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("ffn: token independence and gradients") {
  Rng rng(7);
  ParameterSet<double> params;
  auto p = FfnParams<double>::make(params, "ffn", 4, 3, rng);
  CHECK(ffn(V(T(4, 3, 3)), p).value().mat().isZero(0));
  randomize(params, rng);
  T x = randn(4, 3, 3, rng);
  x.mat().col(4) = x.mat().col(0);
  const T out = ffn(V(x), p).value();
  CHECK(out.mat().col(4) == out.mat().col(0));
  T perturbed = x;
  perturbed.mat().col(7).setRandom();
  const T out2 = ffn(V(perturbed), p).value();
  for (int n = 0; n < 9; ++n) {
    if (n != 7) CHECK(out2.mat().col(n) == out.mat().col(n));
  }
  const V xv = leaf(randn(4, 2, 3, rng));
  const auto r = check_gradients(project([&] { return ffn(xv, p); }), {xv, p.fc1.weight, p.fc1.bias, p.fc2.weight,
                                                                       p.fc2.bias});
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("global context block: residual identity, resolution, composition, gradients") {
  Rng rng(8);
  auto b = make_self_block(8, 2, rng);
  XcitBlockParams<double>& p = b->block;
  const V c(randn(8, 4, 4, rng));

  SUBCASE("zero gammas give C + PE") {
    zero_gammas(p);
    CHECK(global_context_block(c, p).value().mat() == positional_embed(c).value().mat());
  }
  SUBCASE("same spatial size at every scale") {
    for (int side : {2, 4, 8}) {
      const auto out = global_context_block(V(randn(8, side, side + 1, rng)), p).value();
      CHECK(out.height() == side);
      CHECK(out.width() == side + 1);
      CHECK(out.channels() == 8);
    }
  }
  SUBCASE("matches the composition of its sub-operations") {
    const V csp = positional_embed(c);
    const auto kqv = kqv_project(layer_norm(csp, p.norm_kq_gain, p.norm_kq_bias), p.key, p.query, p.value, 2);
    VectorX<double> tau = p.log_temperature.value().mat().col(0).array().exp();
    const T attended = xca_forward(kqv.key.value(), kqv.query.value(), kqv.value.value(), tau, 2).output;
    T int1 = csp.value();
    for (int ch = 0; ch < 8; ++ch) int1.mat().row(ch) += p.gamma1.value()(ch, 0, 0) * attended.mat().row(ch);
    const T l = lpi(layer_norm(V(int1), p.norm2_gain, p.norm2_bias), p.lpi).value();
    T int2 = int1;
    for (int ch = 0; ch < 8; ++ch) int2.mat().row(ch) += p.gamma2.value()(ch, 0, 0) * l.mat().row(ch);
    const T f = ffn(layer_norm(V(int2), p.norm3_gain, p.norm3_bias), p.ffn).value();
    T gc = int2;
    for (int ch = 0; ch < 8; ++ch) gc.mat().row(ch) += p.gamma3.value()(ch, 0, 0) * f.mat().row(ch);
    CHECK(max_abs_diff(global_context_block(c, p).value().mat(), gc.mat()) < 1e-12);
  }
  SUBCASE("gradients w.r.t. input and every parameter") {
    const V x = leaf(randn(8, 3, 3, rng));
    std::vector<V> inputs = all_parameters(b->params);
    inputs.push_back(x);
    const auto r = check_gradients(project([&] { return global_context_block(x, p); }), inputs);
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("cross motion grouping") {
  Rng rng(9);
  auto b = make_cross_block(4, 6, 2, rng);
  XcitBlockParams<double>& p = b->block;
  const V gc(randn(4, 2, 2, rng)), mf(randn(6, 2, 2, rng));

  SUBCASE("zero gammas return MF") {
    zero_gammas(p);
    CHECK(cross_motion_grouping(gc, mf, p).value().mat() == mf.value().mat());
  }
  SUBCASE("spatial mismatch") {
    CHECK_THROWS_AS(cross_motion_grouping(V(randn(4, 2, 3, rng)), mf, p), ShapeError);
  }
  SUBCASE("equal logits give uniform mixing within each head") {
    // Zero key/query projections make every logit zero.
    for (V w : {p.key.weight, p.key.bias, p.query.weight, p.query.bias}) w.mutable_value().mat().setZero();
    const V vin = p.value(layer_norm(mf, p.norm_v_gain, p.norm_v_bias));
    const auto kqin = layer_norm(positional_embed(gc), p.norm_kq_gain, p.norm_kq_bias);
    const T out = xca(p.key(kqin), p.query(kqin), vin, p.log_temperature, 2).value();
    for (int n = 0; n < 4; ++n) {
      for (int h = 0; h < 2; ++h) {
        const double mean = 0.5 * (vin.value().mat()(2 * h, n) + vin.value().mat()(2 * h + 1, n));
        CHECK(out.mat()(2 * h, n) == doctest::Approx(mean).epsilon(1e-12));
        CHECK(out.mat()(2 * h + 1, n) == doctest::Approx(mean).epsilon(1e-12));
      }
    }
  }
  SUBCASE("attention path matches a scalar brute force (N = 4, d = 4, h = 2)") {
    for (V g : {p.gamma2, p.gamma3}) g.mutable_value().mat().setZero();
    const auto pe = sinusoidal_embedding<double>(4, 2, 2);
    const auto norm = [](const std::vector<double>& x, const T& gain, const T& bias) {
      double mean = 0, var = 0;
      for (double v : x) mean += v / x.size();
      for (double v : x) var += (v - mean) * (v - mean) / x.size();
      std::vector<double> out(x.size());
      for (std::size_t c = 0; c < x.size(); ++c) out[c] = (x[c] - mean) / std::sqrt(var + 1e-5) * gain(c, 0, 0) + bias(c, 0, 0);
      return out;
    };
    const auto linear = [](const std::vector<double>& x, const Conv2d<double>& conv) {
      const T& w = conv.weight.value();
      std::vector<double> out(w.channels());
      for (int o = 0; o < w.channels(); ++o) {
        out[o] = conv.bias.value()(o, 0, 0);
        for (std::size_t i = 0; i < x.size(); ++i) out[o] += w(o, 0, static_cast<int>(i)) * x[i];
      }
      return out;
    };
    oracle::Grid K, Q, Vg;
    const auto g_tokens = oracle::tokens_of(gc.value()), m_tokens = oracle::tokens_of(mf.value());
    const auto pe_tokens = oracle::tokens_of(pe);
    for (int n = 0; n < 4; ++n) {
      std::vector<double> x(4);
      for (int c = 0; c < 4; ++c) x[c] = g_tokens[n][c] + pe_tokens[n][c];
      const auto xn = norm(x, p.norm_kq_gain.value(), p.norm_kq_bias.value());
      K.push_back(linear(xn, p.key));
      Q.push_back(linear(xn, p.query));
      Vg.push_back(linear(norm(m_tokens[n], p.norm_v_gain.value(), p.norm_v_bias.value()), p.value));
    }
    std::vector<double> tau(2);
    for (int h = 0; h < 2; ++h) tau[h] = std::exp(p.log_temperature.value()(h, 0, 0));
    const auto att = oracle::xca(K, Q, Vg, tau, 2);
    oracle::Grid expect;
    for (int n = 0; n < 4; ++n) {
      auto o = linear(att[n], p.out);
      for (int c = 0; c < 6; ++c) o[c] = m_tokens[n][c] + p.gamma1.value()(c, 0, 0) * o[c];
      expect.push_back(o);
    }
    CHECK(max_grid_diff(expect, cross_motion_grouping(gc, mf, p).value()) < 1e-10);
  }
  SUBCASE("gradients w.r.t. both streams and every parameter") {
    const V g = leaf(randn(4, 3, 3, rng)), m = leaf(randn(6, 3, 3, rng));
    std::vector<V> inputs = all_parameters(b->params);
    inputs.push_back(g);
    inputs.push_back(m);
    const auto r = check_gradients(project([&] { return cross_motion_grouping(g, m, p); }), inputs);
    CHECK(r.max_rel < 1e-4);
  }
}
