#pragma once

#include <cstdint>
#include <string>

#include "ccmr/tensor.hpp"

namespace ccmr {

// Flow fields are 2 x H x W (u, v); masks are 1 x H x W with nonzero = selected.
using FlowField = Tensor<float>;
using Mask = Tensor<float>;

/// Mean end-point error over masked pixels (all pixels for an empty mask).
/// Returns 0 when the mask selects nothing.
double aepe(const FlowField& flow, const FlowField& gt, const Mask& mask = {});

/// Percentage of masked pixels with EPE > 3 px and EPE > 5% of |gt|.
double fl_error(const FlowField& flow, const FlowField& gt, const Mask& mask = {});

struct RegionSplit {
  double matched = 0.0;
  double unmatched = 0.0;
  std::int64_t n_matched = 0;
  std::int64_t n_unmatched = 0;
};

enum class Metric { kAepe, kFl };

/// Evaluates `metric` separately on non-occluded and occluded valid pixels.
/// `occluded` nonzero marks unmatched pixels.
RegionSplit split_regions(Metric metric, const FlowField& flow, const FlowField& gt, const Mask& occluded,
                          const Mask& valid = {});

struct EvalResult {
  double aepe_all = 0.0;
  double aepe_matched = 0.0;
  double aepe_unmatched = 0.0;
  double fl_all = 0.0;
  double fl_noc = 0.0;
  std::int64_t n_all = 0;
  std::int64_t n_matched = 0;
  std::int64_t n_unmatched = 0;
  bool has_regions = false;  // false: no occlusion mask, region columns absent
};

EvalResult evaluate(const FlowField& flow, const FlowField& gt, const Mask& valid = {}, const Mask& occluded = {});

// Middlebury .flo: float 202021.25, int32 width, int32 height, then (u, v)
// float32 pairs row-major, all little-endian.
inline constexpr float kFloMagic = 202021.25f;
FlowField read_flo(const std::string& path);
void write_flo(const std::string& path, const FlowField& flow);

struct KittiFlow {
  FlowField flow;
  Mask valid;
};

// KITTI 16-bit RGB PNG: u = (R - 2^15) / 64, v = (G - 2^15) / 64, valid = B > 0.
KittiFlow read_kitti_png(const std::string& path);
void write_kitti_png(const std::string& path, const FlowField& flow, const Mask& valid = {});

/// 8-bit RGB image, 3 x H x W with values in [0, 255].
using Rgb8 = Tensor<std::uint8_t>;

/// Color-wheel rendering: hue = direction, saturation = magnitude / max_rad
/// (clipped at 1), zero flow is white. max_rad <= 0 uses the largest
/// magnitude in the field.
Rgb8 flow_to_color(const FlowField& flow, double max_rad = -1.0);

/// Reads an 8-bit gray/RGB(A) PNG as 3 x H x W floats in [-1, 1].
Tensor<float> read_image(const std::string& path);
void write_png(const std::string& path, const Rgb8& image);
void write_ppm(const std::string& path, const Rgb8& image);
/// Writes PNG or PPM according to the extension.
void write_rgb(const std::string& path, const Rgb8& image);

/// Maps [0, 1] to a black-red-yellow-white ramp.
Rgb8 heatmap(const Tensor<float>& values);

}  // namespace ccmr
