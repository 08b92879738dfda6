#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ccmr/estimator.hpp"

namespace ccmr {

enum class LossKind { kL2, kRobust };

struct LossConfig {
  LossKind kind = LossKind::kL2;
  // One weight per prediction, (scale, iteration) order.
  std::vector<double> weights;
  double epsilon = 0.01;  // robust: (|e| + epsilon)^exponent
  double exponent = 0.7;

  void validate() const;
};

/// w_k = gamma^(count - 1 - k); gamma must lie in (0, 1).
std::vector<double> make_loss_weights(int count, double gamma);
std::vector<double> make_loss_weights(const IterationSchedule& schedule, double gamma);

/// Weighted sum over predictions of the masked per-pixel mean of
/// |f - gt|_2 (L2) or (|f - gt|_2 + eps)^q (robust). `valid` is 1 x H x W
/// with nonzero = supervised; an empty tensor supervises every pixel.
template <typename Scalar>
Var<Scalar> multiscale_loss(const std::vector<Var<Scalar>>& predictions, const Tensor<Scalar>& gt,
                            const Tensor<Scalar>& valid, const LossConfig& config);

struct SyntheticSample {
  Tensor<float> image1;  // 3 x H x W in [-1, 1]
  Tensor<float> image2;
  Tensor<float> flow;    // 2 x H x W, frame 1 -> frame 2
  Tensor<float> valid;   // 1 x H x W, 1 = matched (stays in frame, fb-consistent)
};

struct SyntheticOptions {
  // Largest displacement magnitude in pixels; negative means size / 8.
  double max_displacement = -1.0;
  double fb_threshold = 1.0;
};

/// Deterministic per seed. Frame 2 is frame 1's continuous texture pushed
/// through a smooth warp (affine + low-frequency perturbation); the ground
/// truth is that warp sampled at frame-1 pixels.
std::vector<SyntheticSample> generate_synthetic(int count, int size, std::uint64_t seed,
                                                const SyntheticOptions& options = {});

/// Bilinear backward warp: out(x) = image(x + flow(x)), zero outside.
Tensor<float> backward_warp(const Tensor<float>& image, const Tensor<float>& flow);

/// AdamW over a parameter set.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(ParameterSet<Scalar>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                double weight_decay = 0.0);

  void step(double lr);
  std::int64_t steps() const { return steps_; }

  // Moments in parameter order, for checkpointing.
  std::vector<Tensor<Scalar>>& first_moments() { return m_; }
  std::vector<Tensor<Scalar>>& second_moments() { return v_; }
  void set_steps(std::int64_t n) { steps_ = n; }

 private:
  ParameterSet<Scalar>& params_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t steps_ = 0;
  std::vector<Tensor<Scalar>> m_, v_;
};

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(ParameterSet<Scalar>& params, double max_norm);

struct LrSchedule {
  enum class Kind { kOneCycle, kConstantThenDecay, kConstant };
  Kind kind = Kind::kOneCycle;
  double peak = 4e-4;
  int total_steps = 1000;
  double warmup_fraction = 0.05;  // one-cycle: linear warm-up share
  double decay_start = 0.5;       // constant-then-decay: share held constant

  double at(int step) const;
};

struct TrainConfig {
  int steps = 2000;
  int batch_size = 2;
  LrSchedule lr;
  double weight_decay = 1e-5;
  double clip_norm = 1.0;
  IterationSchedule schedule{{4, 5, 5}};
  LossConfig loss;
  double loss_gamma = 0.8;
  int eval_every = 100;
  std::uint64_t seed = 0;
};

struct TrainRecord {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double aepe = -1.0;  // negative when not evaluated this step
};

struct TrainState {
  int step = 0;  // optimizer steps completed
  std::vector<TrainRecord> curve;
};

/// Mean over samples of the valid-pixel AEPE of the final estimate.
double dataset_aepe(const CcmrModel<float>& model, const std::vector<SyntheticSample>& data,
                    const IterationSchedule& schedule, bool identical_frames = false);

/// Runs optimizer steps state.step + 1 .. config.steps. Sample order depends
/// only on (seed, step), so a resumed run replays an uninterrupted one.
/// Throws NumericError if the loss becomes non-finite.
void train_toy(CcmrModel<float>& model, Adam<float>& optimizer, const std::vector<SyntheticSample>& data,
               const TrainConfig& config, TrainState& state,
               const std::function<void(const TrainRecord&)>& on_step = {});

}  // namespace ccmr
