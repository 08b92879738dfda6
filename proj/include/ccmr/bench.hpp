#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccmr/tensor.hpp"

namespace ccmr {

enum class Mechanism { kToken, kXca };

std::string to_string(Mechanism m);
Mechanism parse_mechanism(const std::string& name);

/// softmax(Q K^T / sqrt(d)) V with the N x N attention matrix materialised.
/// K and Q come from the context, V from the motion features; all N x d.
template <typename Scalar>
MatrixX<Scalar> token_cross_attention(const MatrixX<Scalar>& K, const MatrixX<Scalar>& Q, const MatrixX<Scalar>& V,
                                      MatrixX<Scalar>* attention = nullptr);

/// Attention-matrix element count: token h * N^2, xca h * (d / h)^2 = d^2 / h.
std::int64_t footprint_analytic(Mechanism mechanism, std::int64_t tokens, int dim, int heads);

/// Live/peak byte accounting for the transient buffers of one attention
/// evaluation. Requests that would push the live total past the budget throw
/// BudgetExceeded before anything is allocated.
class MemoryMeter {
 public:
  struct BudgetExceeded : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  explicit MemoryMeter(std::int64_t budget_bytes) : budget_(budget_bytes) {}

  void acquire(std::int64_t bytes);
  void release(std::int64_t bytes) { live_ -= bytes; }
  std::int64_t peak() const { return peak_; }
  std::int64_t live() const { return live_; }

 private:
  std::int64_t budget_;
  std::int64_t live_ = 0;
  std::int64_t peak_ = 0;
};

/// A float matrix whose storage is charged to a meter for its lifetime.
class MeteredMatrix {
 public:
  MeteredMatrix(MemoryMeter& meter, Eigen::Index rows, Eigen::Index cols);
  ~MeteredMatrix();
  MeteredMatrix(const MeteredMatrix&) = delete;
  MeteredMatrix& operator=(const MeteredMatrix&) = delete;

  MatrixX<float>& mat() { return m_; }

 private:
  MemoryMeter& meter_;
  std::int64_t bytes_;
  MatrixX<float> m_;
};

struct BenchConfig {
  std::vector<int> sides{32, 64, 96, 128, 160, 192, 224, 256};  // square token grids
  int dim = 256;
  int xca_heads = 8;
  int token_heads = 1;
  std::int64_t budget_bytes = std::int64_t{2} << 30;
  std::uint64_t seed = 0;
};

struct FootprintPoint {
  int side = 0;
  std::int64_t tokens = 0;
  std::int64_t attention_elements = 0;  // as allocated
  std::int64_t analytic_elements = 0;
  std::int64_t peak_bytes = 0;
  double seconds = 0.0;
};

struct FootprintReport {
  Mechanism mechanism = Mechanism::kXca;
  int dim = 0;
  int heads = 0;
  std::vector<FootprintPoint> points;
  std::vector<int> skipped_sides;  // over the memory budget
  double slope = 0.0;              // NaN when fewer than two points
};

/// Measures peak transient memory of one attention evaluation per ladder
/// size (inputs excluded) and fits the log-log slope against token count.
/// The ladder is truncated at the first size that exceeds the budget.
FootprintReport footprint_empirical(Mechanism mechanism, const BenchConfig& config);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

void write_report_csv(const std::string& path, const std::vector<FootprintReport>& reports);
/// Log-log plot of peak bytes against tokens, one coloured series per report.
void write_report_plot(const std::string& path, const std::vector<FootprintReport>& reports);

}  // namespace ccmr
