#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nstaug {

/// Shape/argument errors raised by every module.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major tensor of doubles.
///
/// Activations use channel-height-width order throughout; conv kernels are
/// (out, in, kh, kw). A rank-1 tensor doubles as a plain vector.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor chw(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0) {
    return Tensor({c, h, w}, fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // rank-3 (c, y, x) access
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  // Channels/height/width of a rank-3 activation.
  std::size_t channels() const { return shape_.at(0); }
  std::size_t height() const { return shape_.at(1); }
  std::size_t width() const { return shape_.at(2); }

  Tensor reshaped(Shape shape) const;
  double sum() const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Linear part of a 2-D convolution: input (C,H,W), kernel (K,C,kh,kw),
/// bias length K. Out-of-range taps read zero.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::span<const double> bias,
              std::size_t stride = 1, std::size_t padding = 0);

enum class ElementOp { add, sub, mul, max, relu, leaky_relu };

Tensor elementwise(ElementOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(ElementOp op, const Tensor& a, double scalar);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);

enum class PoolMode { max, avg };

/// Non-overlapping pooling; the window must divide both spatial extents.
Tensor pool2d(const Tensor& input, std::size_t window, PoolMode mode);
std::vector<double> global_avg_pool(const Tensor& input);

}  // namespace nstaug
