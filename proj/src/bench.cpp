#include "ccmr/bench.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <random>

#include "ccmr/errors.hpp"
#include "ccmr/evalio.hpp"

namespace ccmr {

std::string to_string(Mechanism m) { return m == Mechanism::kToken ? "token" : "xca"; }

Mechanism parse_mechanism(const std::string& name) {
  if (name == "token") return Mechanism::kToken;
  if (name == "xca") return Mechanism::kXca;
  throw ConfigError("unknown attention mechanism '" + name + "' (token, xca)");
}

template <typename Scalar>
MatrixX<Scalar> token_cross_attention(const MatrixX<Scalar>& K, const MatrixX<Scalar>& Q, const MatrixX<Scalar>& V,
                                      MatrixX<Scalar>* attention) {
  if (K.rows() != Q.rows() || K.rows() != V.rows() || K.cols() != Q.cols() || K.cols() != V.cols()) {
    throw ShapeError("token_cross_attention: K, Q, V must all be N x d");
  }
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(K.cols()));
  MatrixX<Scalar> A = (Q * K.transpose()) * scale;
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    const Scalar m = A.row(i).maxCoeff();
    A.row(i) = (A.row(i).array() - m).exp().matrix();
    A.row(i) /= A.row(i).sum();
  }
  MatrixX<Scalar> out = A * V;
  if (attention) *attention = std::move(A);
  return out;
}

template MatrixX<float> token_cross_attention(const MatrixX<float>&, const MatrixX<float>&, const MatrixX<float>&,
                                              MatrixX<float>*);
template MatrixX<double> token_cross_attention(const MatrixX<double>&, const MatrixX<double>&, const MatrixX<double>&,
                                               MatrixX<double>*);

std::int64_t footprint_analytic(Mechanism mechanism, std::int64_t tokens, int dim, int heads) {
  if (tokens < 1 || dim < 1 || heads < 1 || dim % heads != 0) {
    throw ConfigError("footprint_analytic: need N >= 1 and d divisible by h");
  }
  if (mechanism == Mechanism::kToken) return heads * tokens * tokens;
  const std::int64_t dh = dim / heads;
  return heads * dh * dh;
}

void MemoryMeter::acquire(std::int64_t bytes) {
  if (live_ + bytes > budget_) {
    throw BudgetExceeded("request of " + std::to_string(bytes) + " bytes exceeds the " + std::to_string(budget_) +
                         "-byte budget");
  }
  live_ += bytes;
  peak_ = std::max(peak_, live_);
}

MeteredMatrix::MeteredMatrix(MemoryMeter& meter, Eigen::Index rows, Eigen::Index cols)
    : meter_(meter), bytes_(static_cast<std::int64_t>(rows) * cols * static_cast<std::int64_t>(sizeof(float))) {
  meter_.acquire(bytes_);
  m_.resize(rows, cols);
}

MeteredMatrix::~MeteredMatrix() { meter_.release(bytes_); }

namespace {

void softmax_columns(MatrixX<float>& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    auto col = m.col(j);
    col.array() = (col.array() - col.maxCoeff()).exp();
    col /= col.sum();
  }
}

// One token cross-attention evaluation over channel-major d x N inputs.
// Logits are stored keys x queries so the softmax runs down contiguous columns.
std::int64_t run_token(MemoryMeter& meter, const MatrixX<float>& K, const MatrixX<float>& Q, const MatrixX<float>& V,
                       int heads) {
  const Eigen::Index d = K.rows(), n = K.cols(), dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<std::unique_ptr<MeteredMatrix>> attn;
  std::int64_t elements = 0;
  for (int h = 0; h < heads; ++h) {
    attn.push_back(std::make_unique<MeteredMatrix>(meter, n, n));
    MatrixX<float>& S = attn.back()->mat();
    S.noalias() = K.middleRows(h * dh, dh).transpose() * Q.middleRows(h * dh, dh);
    S *= scale;
    softmax_columns(S);
    elements += S.size();
  }
  MeteredMatrix out(meter, d, n);
  for (int h = 0; h < heads; ++h) out.mat().middleRows(h * dh, dh).noalias() = V.middleRows(h * dh, dh) * attn[h]->mat();
  return elements;
}

std::int64_t run_xca(MemoryMeter& meter, const MatrixX<float>& K, const MatrixX<float>& Q, const MatrixX<float>& V,
                     int heads) {
  const Eigen::Index d = K.rows(), n = K.cols(), dh = d / heads;
  MeteredMatrix kn(meter, d, n), qn(meter, d, n);
  for (Eigen::Index c = 0; c < d; ++c) {
    kn.mat().row(c) = K.row(c) / std::max(K.row(c).norm(), 1e-6f);
    qn.mat().row(c) = Q.row(c) / std::max(Q.row(c).norm(), 1e-6f);
  }
  std::vector<std::unique_ptr<MeteredMatrix>> attn;
  std::int64_t elements = 0;
  for (int h = 0; h < heads; ++h) {
    attn.push_back(std::make_unique<MeteredMatrix>(meter, dh, dh));
    MatrixX<float>& A = attn.back()->mat();
    A.noalias() = kn.mat().middleRows(h * dh, dh) * qn.mat().middleRows(h * dh, dh).transpose();
    softmax_columns(A);
    elements += A.size();
  }
  MeteredMatrix out(meter, d, n);
  for (int h = 0; h < heads; ++h) {
    out.mat().middleRows(h * dh, dh).noalias() = attn[h]->mat().transpose() * V.middleRows(h * dh, dh);
  }
  return elements;
}

}  // namespace

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("loglog_slope: size mismatch");
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const Eigen::Index n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd A(n, 2);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw ConfigError("loglog_slope: values must be positive");
    A(i, 0) = std::log(x[i]);
    A(i, 1) = 1.0;
    b(i) = std::log(y[i]);
  }
  return A.colPivHouseholderQr().solve(b)(0);
}

FootprintReport footprint_empirical(Mechanism mechanism, const BenchConfig& config) {
  const int heads = mechanism == Mechanism::kToken ? config.token_heads : config.xca_heads;
  if (config.dim < 1 || heads < 1 || config.dim % heads != 0) throw ConfigError("bench: dim must be divisible by heads");
  FootprintReport report;
  report.mechanism = mechanism;
  report.dim = config.dim;
  report.heads = heads;
  std::vector<int> sides = config.sides;
  std::sort(sides.begin(), sides.end());
  for (std::size_t i = 0; i < sides.size(); ++i) {
    const int side = sides[i];
    if (side < 1) throw ConfigError("bench: sizes must be positive");
    const std::int64_t n = static_cast<std::int64_t>(side) * side;
    std::mt19937_64 rng(config.seed + static_cast<std::uint64_t>(side));
    std::normal_distribution<float> normal;
    const auto random = [&] {
      MatrixX<float> m(config.dim, n);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
      return m;
    };
    const MatrixX<float> K = random(), Q = random(), V = random();
    MemoryMeter meter(config.budget_bytes);
    FootprintPoint point;
    point.side = side;
    point.tokens = n;
    point.analytic_elements = footprint_analytic(mechanism, n, config.dim, heads);
    const auto start = std::chrono::steady_clock::now();
    try {
      point.attention_elements = mechanism == Mechanism::kToken ? run_token(meter, K, Q, V, heads)
                                                                : run_xca(meter, K, Q, V, heads);
    } catch (const MemoryMeter::BudgetExceeded&) {
      report.skipped_sides.assign(sides.begin() + static_cast<std::ptrdiff_t>(i), sides.end());
      break;
    }
    point.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    point.peak_bytes = meter.peak();
    report.points.push_back(point);
  }
  std::vector<double> x, y;
  for (const auto& p : report.points) {
    x.push_back(static_cast<double>(p.tokens));
    y.push_back(static_cast<double>(p.peak_bytes));
  }
  report.slope = loglog_slope(x, y);
  return report;
}

void write_report_csv(const std::string& path, const std::vector<FootprintReport>& reports) {
  std::ofstream out(path);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "mechanism,dim,heads,side,tokens,attention_elements,analytic_elements,peak_bytes,seconds,slope\n";
  for (const auto& r : reports) {
    for (const auto& p : r.points) {
      out << to_string(r.mechanism) << ',' << r.dim << ',' << r.heads << ',' << p.side << ',' << p.tokens << ','
          << p.attention_elements << ',' << p.analytic_elements << ',' << p.peak_bytes << ',' << p.seconds << ','
          << r.slope << '\n';
    }
    for (int side : r.skipped_sides) {
      out << to_string(r.mechanism) << ',' << r.dim << ',' << r.heads << ',' << side << ','
          << static_cast<std::int64_t>(side) * side << ",,"
          << footprint_analytic(r.mechanism, static_cast<std::int64_t>(side) * side, r.dim, r.heads)
          << ",over_budget,," << r.slope << '\n';
    }
  }
}

void write_report_plot(const std::string& path, const std::vector<FootprintReport>& reports) {
  constexpr int W = 640, H = 480, margin = 48;
  Rgb8 img(3, H, W);
  img.mat().setConstant(255);
  double x0 = std::numeric_limits<double>::max(), x1 = 0, y0 = std::numeric_limits<double>::max(), y1 = 0;
  for (const auto& r : reports) {
    for (const auto& p : r.points) {
      x0 = std::min(x0, std::log10(double(p.tokens)));
      x1 = std::max(x1, std::log10(double(p.tokens)));
      y0 = std::min(y0, std::log10(double(p.peak_bytes)));
      y1 = std::max(y1, std::log10(double(p.peak_bytes)));
    }
  }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  x0 = std::floor(x0), x1 = std::ceil(x1), y0 = std::floor(y0), y1 = std::ceil(y1);
  const auto px = [&](double lx) { return margin + (lx - x0) / (x1 - x0) * (W - 2 * margin); };
  const auto py = [&](double ly) { return H - margin - (ly - y0) / (y1 - y0) * (H - 2 * margin); };
  const auto dot = [&](int x, int y, const std::array<std::uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= W || y >= H) return;
    for (int k = 0; k < 3; ++k) img(k, y, x) = c[k];
  };
  const auto line = [&](double ax, double ay, double bx, double by, const std::array<std::uint8_t, 3>& c) {
    const int steps = static_cast<int>(std::max(std::abs(bx - ax), std::abs(by - ay))) + 1;
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      dot(static_cast<int>(std::lround(ax + t * (bx - ax))), static_cast<int>(std::lround(ay + t * (by - ay))), c);
    }
  };
  const std::array<std::uint8_t, 3> grid{220, 220, 220}, axis{0, 0, 0};
  for (double d = x0; d <= x1; d += 1) line(px(d), py(y0), px(d), py(y1), grid);
  for (double d = y0; d <= y1; d += 1) line(px(x0), py(d), px(x1), py(d), grid);
  line(px(x0), py(y0), px(x1), py(y0), axis);
  line(px(x0), py(y0), px(x0), py(y1), axis);
  static const std::array<std::uint8_t, 3> palette[] = {{214, 39, 40}, {31, 119, 180}, {44, 160, 44}, {255, 127, 14}};
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& c = palette[i % 4];
    const auto& pts = reports[i].points;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const double ax = px(std::log10(double(pts[k].tokens))), ay = py(std::log10(double(pts[k].peak_bytes)));
      for (int dy = -3; dy <= 3; ++dy) {
        for (int dx = -3; dx <= 3; ++dx) dot(static_cast<int>(ax) + dx, static_cast<int>(ay) + dy, c);
      }
      if (k + 1 < pts.size()) {
        line(ax, ay, px(std::log10(double(pts[k + 1].tokens))), py(std::log10(double(pts[k + 1].peak_bytes))), c);
      }
    }
  }
  write_rgb(path, img);
}

}  // namespace ccmr
