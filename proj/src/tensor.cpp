#include "nstaug/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace nstaug {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::span<const double> bias, std::size_t stride,
              std::size_t padding) {
  if (input.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != input.channels()) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " incompatible with kernel " +
                     shape_str(kernel.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t out_c = kernel.dim(0), in_c = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (!bias.empty() && bias.size() != out_c) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " for kernel " +
                     shape_str(kernel.shape()));
  }
  const std::size_t ph = input.height() + 2 * padding, pw = input.width() + 2 * padding;
  if (ph < kh || pw < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  const std::size_t oh = (ph - kh) / stride + 1, ow = (pw - kw) / stride + 1;
  const auto ih = static_cast<long>(input.height()), iw = static_cast<long>(input.width());
  const auto pad = static_cast<long>(padding);

  Tensor out = Tensor::chw(out_c, oh, ow);
  for (std::size_t k = 0; k < out_c; ++k) {
    const double b = bias.empty() ? 0.0 : bias[k];
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = b;
        for (std::size_t c = 0; c < in_c; ++c) {
          for (std::size_t m = 0; m < kh; ++m) {
            const long y = static_cast<long>(oy * stride + m) - pad;
            if (y < 0 || y >= ih) continue;
            for (std::size_t n = 0; n < kw; ++n) {
              const long x = static_cast<long>(ox * stride + n) - pad;
              if (x < 0 || x >= iw) continue;
              acc += kernel[((k * in_c + c) * kh + m) * kw + n] *
                     input.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
            }
          }
        }
        out.at(k, oy, ox) = acc;
      }
    }
  }
  return out;
}

namespace {

double apply(ElementOp op, double x, double y) {
  switch (op) {
    case ElementOp::add: return x + y;
    case ElementOp::sub: return x - y;
    case ElementOp::mul: return x * y;
    case ElementOp::max: return std::max(x, y);
    case ElementOp::relu: return x > 0.0 ? x : 0.0;
    case ElementOp::leaky_relu: return x > 0.0 ? x : y * x;
  }
  return 0.0;
}

}  // namespace

Tensor elementwise(ElementOp op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("elementwise: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = apply(op, a[i], b[i]);
  return out;
}

Tensor elementwise(ElementOp op, const Tensor& a, double scalar) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = apply(op, a[i], scalar);
  return out;
}

Tensor relu(const Tensor& a) { return elementwise(ElementOp::relu, a, 0.0); }

Tensor leaky_relu(const Tensor& a, double slope) { return elementwise(ElementOp::leaky_relu, a, slope); }

Tensor pool2d(const Tensor& input, std::size_t window, PoolMode mode) {
  if (input.rank() != 3) throw ShapeError("pool2d: expected (C,H,W), got " + shape_str(input.shape()));
  if (window == 0 || window > input.height() || window > input.width()) {
    throw ShapeError("pool2d: window " + std::to_string(window) + " larger than input " +
                     shape_str(input.shape()));
  }
  if (input.height() % window != 0 || input.width() % window != 0) {
    throw ShapeError("pool2d: window " + std::to_string(window) + " does not divide input " +
                     shape_str(input.shape()));
  }
  const std::size_t oh = input.height() / window, ow = input.width() / window;
  Tensor out = Tensor::chw(input.channels(), oh, ow);
  const double inv = 1.0 / static_cast<double>(window * window);
  for (std::size_t c = 0; c < input.channels(); ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = mode == PoolMode::max ? input.at(c, oy * window, ox * window) : 0.0;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const double v = input.at(c, oy * window + dy, ox * window + dx);
            acc = mode == PoolMode::max ? std::max(acc, v) : acc + v;
          }
        }
        out.at(c, oy, ox) = mode == PoolMode::max ? acc : acc * inv;
      }
    }
  }
  return out;
}

std::vector<double> global_avg_pool(const Tensor& input) {
  if (input.rank() != 3 || input.height() * input.width() == 0) {
    throw ShapeError("global_avg_pool: expected nonempty (C,H,W), got " + shape_str(input.shape()));
  }
  const std::size_t hw = input.height() * input.width();
  std::vector<double> out(input.channels());
  for (std::size_t c = 0; c < input.channels(); ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += input[c * hw + i];
    out[c] = acc / static_cast<double>(hw);
  }
  return out;
}

}  // namespace nstaug
