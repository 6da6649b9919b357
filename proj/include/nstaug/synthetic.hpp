#pragma once

#include <cstdint>
#include <string>

#include "nstaug/image.hpp"
#include "nstaug/rng.hpp"

namespace nstaug {

enum class Label { benign = 0, malignant = 1 };

const char* label_name(Label l);
Label parse_label(const std::string& s);

struct SyntheticStyle {
  double speckle = 0.25;      // std of the multiplicative noise
  double background = 0.6;
  double lesion = 0.2;
};

/// Hypoechoic mass on textured tissue with multiplicative speckle.
/// Benign: wider-than-tall ellipse with a smooth rim. Malignant:
/// taller-than-wide with a lobulated, spiculated rim.
Image synthetic_lesion(std::size_t side, Label label, Rng& rng, const SyntheticStyle& style = {});

/// Constant image times seeded multiplicative speckle, for filter tests.
Image speckled_constant(std::size_t height, std::size_t width, double level, double sigma, Rng& rng);

}  // namespace nstaug
