#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccmr/training.hpp"

namespace ccmr {

/// Versioned binary checkpoint:
///   "CCMRCKPT" | u32 version | u64 n + n bytes JSON header (model config, metadata)
///   | u64 step | u64 count | count x (u32 n + name, i32 c, h, w, c*h*w f64)
///   | u8 has_optimizer [| i64 adam steps | count x (m f64..., v f64...)]
/// All integers and doubles little-endian.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  nlohmann::json meta = nlohmann::json::object();
  std::int64_t step = 0;
  std::vector<std::pair<std::string, Tensor<double>>> params;
  bool has_optimizer = false;
  std::int64_t optimizer_steps = 0;
  std::vector<Tensor<double>> first_moments;
  std::vector<Tensor<double>> second_moments;
};

Checkpoint capture(const CcmrModel<float>& model, std::int64_t step, Adam<float>* optimizer = nullptr,
                   const nlohmann::json& meta = nlohmann::json::object());

/// Copies parameters (and optimizer moments when both sides have them) into
/// a model built from `ckpt.config`. Names and shapes must match exactly.
void restore(const Checkpoint& ckpt, CcmrModel<float>& model, Adam<float>* optimizer = nullptr);

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// Throws FormatError on a bad magic, unknown version or truncated file.
Checkpoint read_checkpoint(const std::string& path);

}  // namespace ccmr
