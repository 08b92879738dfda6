#pragma once

#include <stdexcept>
#include <string>

namespace ccmr {

// Tensor shapes or scale ladders that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid model / training / CLI configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or unreadable files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN / Inf encountered where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Image size not divisible by the coarsest stride. Carries the pads that
// would make it divisible (bottom and right, replicate padding).
class PaddingError : public ShapeError {
 public:
  PaddingError(int height, int width, int pad_bottom, int pad_right)
      : ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) +
                   " not divisible by 16; pad bottom by " + std::to_string(pad_bottom) +
                   " and right by " + std::to_string(pad_right)),
        pad_bottom(pad_bottom),
        pad_right(pad_right) {}

  int pad_bottom;
  int pad_right;
};

}  // namespace ccmr
