#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "ccmr/training.hpp"

namespace ccmr {

/// Everything `ccmr train-toy` needs, read from one JSON file. Keys:
///
///   model        ModelConfig object; {"preset": "toy"} by default
///   model_seed   parameter initialisation seed
///   data         {samples, size, seed, max_displacement}
///   train        {steps, batch_size, weight_decay, clip_norm, eval_every, seed,
///                 iters ("4,5,5" or a preset name: train/sintel/kitti),
///                 lr {schedule: one_cycle|constant_then_decay|constant, peak,
///                     warmup_fraction, decay_start},
///                 loss {kind: l2|robust, gamma, epsilon, exponent}}
///   output       {checkpoint, curve, checkpoint_every}
///
/// Missing keys keep their defaults; unknown keys are rejected.
struct ToyRunConfig {
  ModelConfig model = ModelConfig::toy();
  std::uint64_t model_seed = 1;
  int samples = 20;
  int size = 64;
  std::uint64_t data_seed = 7;
  double max_displacement = -1.0;
  TrainConfig train;
  std::string checkpoint = "toy.ckpt";
  std::string curve = "loss_curve.csv";
  int checkpoint_every = 0;  // 0: only at the end
};

ToyRunConfig toy_run_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ToyRunConfig& config);
ToyRunConfig load_toy_run(const std::string& path);

LossKind parse_loss_kind(const std::string& name);
LrSchedule::Kind parse_lr_kind(const std::string& name);

}  // namespace ccmr
