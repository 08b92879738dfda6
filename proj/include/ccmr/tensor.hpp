#pragma once

#include <Eigen/Dense>

#include <string>

#include "ccmr/errors.hpp"

namespace ccmr {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Dense channels x height x width map.
///
/// Storage is a column-major `channels x (height*width)` Eigen matrix, so one
/// column holds the channel vector of one pixel (interleaved HWC in memory).
/// Per-token linear algebra (attention, layer norm, 1x1 convolutions) maps
/// directly onto matrix products over this view.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int height, int width)
      : channels_(channels), height_(height), width_(width), data_(MatrixX<Scalar>::Zero(channels, height * width)) {}
  Tensor(int channels, int height, int width, MatrixX<Scalar> data)
      : channels_(channels), height_(height), width_(width), data_(std::move(data)) {
    if (data_.rows() != channels || data_.cols() != static_cast<Eigen::Index>(height) * width) {
      throw ShapeError("tensor data does not match " + shape_string());
    }
  }

  static Tensor zeros(int channels, int height, int width) { return Tensor(channels, height, width); }
  static Tensor constant(int channels, int height, int width, Scalar value) {
    Tensor t(channels, height, width);
    t.data_.setConstant(value);
    return t;
  }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.channels_, other.height_, other.width_); }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int pixels() const { return height_ * width_; }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar& operator()(int c, int y, int x) { return data_(c, y * width_ + x); }
  Scalar operator()(int c, int y, int x) const { return data_(c, y * width_ + x); }

  MatrixX<Scalar>& mat() { return data_; }
  const MatrixX<Scalar>& mat() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  bool same_shape(const Tensor& other) const {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }
  bool same_spatial(const Tensor& other) const { return height_ == other.height_ && width_ == other.width_; }

  std::string shape_string() const {
    return std::to_string(channels_) + "x" + std::to_string(height_) + "x" + std::to_string(width_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(channels_, height_, width_, data_.template cast<Other>());
  }

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  MatrixX<Scalar> data_;
};

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape " + a.shape_string() + " vs " + b.shape_string());
  }
}

template <typename Scalar>
void require_same_spatial(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (!a.same_spatial(b)) {
    throw ShapeError(std::string(what) + ": spatial size " + a.shape_string() + " vs " + b.shape_string());
  }
}

}  // namespace ccmr
