#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "nstaug/tensor.hpp"

namespace nstaug {

inline constexpr std::size_t kMinImageSide = 8;

/// Grayscale raster with intensities in [0,1], row-major.
class Image {
 public:
  Image() = default;
  Image(std::size_t height, std::size_t width, double fill = 0.0);
  Image(std::size_t height, std::size_t width, std::vector<double> pixels);

  /// Builds from a (1,H,W) tensor, clamping to [0,1].
  static Image from_tensor(const Tensor& t);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return pixels_.size(); }

  double& operator()(std::size_t y, std::size_t x) { return pixels_[y * width_ + x]; }
  double operator()(std::size_t y, std::size_t x) const { return pixels_[y * width_ + x]; }

  const std::vector<double>& pixels() const { return pixels_; }
  std::vector<double>& pixels() { return pixels_; }

  Tensor to_tensor() const { return Tensor({1, height_, width_}, pixels_); }

  /// Throws ShapeError unless pixels lie in [0,1] and both sides are >= 8.
  void validate() const;

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> pixels_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit binary PGM (P5). Intensities map linearly: v/255.
Image read_pgm(const std::filesystem::path& path);
void write_pgm(const Image& image, const std::filesystem::path& path);

struct Rgb {
  std::uint8_t r, g, b;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// 8-bit binary PPM (P6).
void write_ppm(std::size_t height, std::size_t width, const std::vector<Rgb>& pixels,
               const std::filesystem::path& path);
std::vector<Rgb> read_ppm(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

/// FNV-1a over the raw bytes of a double sequence.
std::uint64_t checksum(std::span<const double> values);

}  // namespace nstaug
