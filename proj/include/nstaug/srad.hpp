#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nstaug/image.hpp"

namespace nstaug {

struct Region {
  std::size_t x = 0, y = 0, w = 0, h = 0;

  /// "x,y,w,h"
  static Region parse(const std::string& s);
  void validate(const Image& image) const;
};

struct SradParams {
  std::size_t iterations_per_scale = 10;  // n_t
  std::size_t scales = 8;                 // L
  double dt = 0.05;
  std::optional<Region> region;           // whole image when unset

  void validate(const Image& image) const;
};

inline constexpr double kSradShift = 1e-6;

/// Instantaneous speckle scale: std/mean over the region.
double speckle_scale(const Image& image, const Region& region);

/// One explicit update with speckle scale q0 and Neumann boundaries.
/// Pixels are shifted by kSradShift before the update and back afterwards.
Image srad_step(const Image& image, double q0, double dt);

/// Scale s (1-based) is the image after s * n_t iterations, with q0
/// re-estimated from the region before every iteration.
std::vector<Image> srad_multiscale(const Image& image, const SradParams& params);

/// Per-pixel diffusion coefficients c(q) in [0,1].
std::vector<double> srad_coefficients(const Image& image, double q0);

double region_variance(const Image& image, const Region& region);
double region_mean(const Image& image, const Region& region);

}  // namespace nstaug
