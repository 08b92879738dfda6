#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ccmr/bench.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ccmr;
using namespace ccmr::test;

namespace {

MatrixX<double> random_tokens(int n, int d, Rng& rng) {
  std::normal_distribution<double> dist;
  MatrixX<double> m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

oracle::Grid grid_of(const MatrixX<double>& m) {
  oracle::Grid g(m.rows(), std::vector<double>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) g[i][j] = m(i, j);
  }
  return g;
}

}  // namespace

TEST_CASE("token attention: single token returns V, rows are distributions") {
  Rng rng(1);
  const MatrixX<double> K = random_tokens(1, 4, rng), Q = random_tokens(1, 4, rng), V = random_tokens(1, 4, rng);
  CHECK(max_abs_diff(token_cross_attention(K, Q, V), V) < 1e-15);

  MatrixX<double> A;
  token_cross_attention<double>(random_tokens(9, 3, rng), random_tokens(9, 3, rng), random_tokens(9, 3, rng), &A);
  REQUIRE(A.rows() == 9);
  REQUIRE(A.cols() == 9);
  CHECK((A.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK((A.array() > 0.0).all());
}

TEST_CASE("token attention matches the scalar oracle") {
  Rng rng(2);
  // N = 3, d = 2 by hand: Q row 0 = (1, 0), keys (1, 0), (0, 1), (0, 0).
  MatrixX<double> K(3, 2), Q(3, 2), V(3, 2);
  K << 1, 0, 0, 1, 0, 0;
  Q << 1, 0, 0, 2, 1, 1;
  V << 1, 2, 3, 4, 5, 6;
  const MatrixX<double> out = token_cross_attention(K, Q, V);
  const double s = std::exp(1 / std::sqrt(2.0)), z = s + 2;
  CHECK(out(0, 0) == doctest::Approx((1 * s + 3 + 5) / z).epsilon(1e-14));
  CHECK(out(0, 1) == doctest::Approx((2 * s + 4 + 6) / z).epsilon(1e-14));
  const auto expect = oracle::token_attention(grid_of(K), grid_of(Q), grid_of(V));
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 2; ++c) CHECK(std::abs(out(i, c) - expect[i][c]) < 1e-14);
  }
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixX<double> k = random_tokens(7, 5, rng), q = random_tokens(7, 5, rng), v = random_tokens(7, 5, rng);
    const auto e = oracle::token_attention(grid_of(k), grid_of(q), grid_of(v));
    const MatrixX<double> o = token_cross_attention(k, q, v);
    for (int i = 0; i < 7; ++i) {
      for (int c = 0; c < 5; ++c) CHECK(std::abs(o(i, c) - e[i][c]) < 1e-12);
    }
  }
}

TEST_CASE("analytic footprint") {
  for (std::int64_t n : {1, 1024, 4096, 65536}) CHECK(footprint_analytic(Mechanism::kXca, n, 256, 8) == 8192);
  CHECK(footprint_analytic(Mechanism::kXca, 100, 64, 4) == footprint_analytic(Mechanism::kXca, 1600, 64, 4));
  CHECK(footprint_analytic(Mechanism::kToken, 2048, 256, 1) == 4 * footprint_analytic(Mechanism::kToken, 1024, 256, 1));
  CHECK(footprint_analytic(Mechanism::kToken, 10, 8, 2) == 200);
  CHECK(parse_mechanism("token") == Mechanism::kToken);
  CHECK(parse_mechanism(to_string(Mechanism::kXca)) == Mechanism::kXca);
  CHECK_THROWS_AS(parse_mechanism("linear"), ConfigError);
}

TEST_CASE("memory meter accounting and budget") {
  MemoryMeter meter(1000);
  {
    MeteredMatrix a(meter, 10, 10);  // 400 bytes
    CHECK(meter.live() == 400);
    {
      MeteredMatrix b(meter, 5, 10);
      CHECK(meter.live() == 600);
    }
    CHECK(meter.live() == 400);
    CHECK_THROWS_AS(MeteredMatrix(meter, 20, 10), MemoryMeter::BudgetExceeded);
    CHECK(meter.live() == 400);
  }
  CHECK(meter.live() == 0);
  CHECK(meter.peak() == 600);
}

TEST_CASE("log-log slope") {
  CHECK(loglog_slope({1, 2, 4, 8}, {3, 12, 48, 192}) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(loglog_slope({10, 100, 1000}, {7, 7, 7}) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  CHECK(std::isnan(loglog_slope({5}, {5})));
  CHECK_THROWS_AS(loglog_slope({1, 2}, {1, -1}), ConfigError);
}

TEST_CASE("empirical footprints on a small ladder") {
  BenchConfig cfg;
  cfg.sides = {8, 16, 24, 32};
  cfg.dim = 32;
  cfg.xca_heads = 4;
  cfg.token_heads = 1;
  for (Mechanism m : {Mechanism::kToken, Mechanism::kXca}) {
    const FootprintReport r = footprint_empirical(m, cfg);
    REQUIRE(r.points.size() == 4);
    CHECK(r.skipped_sides.empty());
    for (std::size_t i = 0; i < r.points.size(); ++i) {
      CHECK(r.points[i].attention_elements == r.points[i].analytic_elements);
      if (i) CHECK(r.points[i].peak_bytes >= r.points[i - 1].peak_bytes);
    }
    if (m == Mechanism::kXca) {
      CHECK(r.points[0].attention_elements == 32 * 32 / 4);
      CHECK(r.slope <= 1.2);
    } else {
      CHECK(r.slope > 1.5);
    }
  }
}

TEST_CASE("budget truncates the ladder and the report records it") {
  BenchConfig cfg;
  cfg.sides = {8, 16, 32, 64};
  cfg.dim = 16;
  cfg.budget_bytes = 8 << 20;  // 64^2 tokens need 64 MiB of logits, 32^2 only 4 MiB
  const FootprintReport r = footprint_empirical(Mechanism::kToken, cfg);
  CHECK(r.points.size() == 3);
  CHECK(r.skipped_sides == std::vector<int>{64});

  const auto csv = (std::filesystem::temp_directory_path() / "ccmr_bench_test.csv").string();
  write_report_csv(csv, {r});
  std::ifstream in(csv);
  std::string line;
  int rows = 0, over = 0;
  std::getline(in, line);
  CHECK(line.rfind("mechanism,", 0) == 0);
  while (std::getline(in, line)) {
    ++rows;
    over += line.find("over_budget") != std::string::npos;
  }
  CHECK(rows == 4);
  CHECK(over == 1);
  std::remove(csv.c_str());

  cfg.dim = 15;
  cfg.xca_heads = 4;
  CHECK_THROWS_AS(footprint_empirical(Mechanism::kXca, cfg), ConfigError);
}

TEST_CASE("plot writer produces a PNG") {
  BenchConfig cfg;
  cfg.sides = {8, 16};
  cfg.dim = 8;
  cfg.xca_heads = 2;
  const auto path = (std::filesystem::temp_directory_path() / "ccmr_bench_test.png").string();
  write_report_plot(path, {footprint_empirical(Mechanism::kToken, cfg), footprint_empirical(Mechanism::kXca, cfg)});
  std::ifstream in(path, std::ios::binary);
  char sig[8] = {};
  in.read(sig, 8);
  CHECK(std::string(sig + 1, 3) == "PNG");
  std::remove(path.c_str());
}
