#include "nstaug/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace nstaug {

const char* label_name(Label l) { return l == Label::benign ? "benign" : "malignant"; }

Label parse_label(const std::string& s) {
  if (s == "benign") return Label::benign;
  if (s == "malignant") return Label::malignant;
  throw ShapeError("unknown label '" + s + "' (benign, malignant)");
}

namespace {

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

Image synthetic_lesion(std::size_t side, Label label, Rng& rng, const SyntheticStyle& style) {
  if (side < kMinImageSide) throw ShapeError("synthetic_lesion: side must be >= 8");
  const double s = static_cast<double>(side);
  const double pi = std::numbers::pi;

  const double cx = s * rng.uniform(0.42, 0.58), cy = s * rng.uniform(0.42, 0.58);
  double ax, ay;
  if (label == Label::benign) {
    ax = s * rng.uniform(0.30, 0.38);
    ay = ax * rng.uniform(0.45, 0.62);
  } else {
    ay = s * rng.uniform(0.30, 0.38);
    ax = ay * rng.uniform(0.50, 0.70);
  }
  const double tilt = rng.uniform(-0.25, 0.25);

  // rim modulation r(theta)
  const int lobes = label == Label::benign ? 2 : 5 + static_cast<int>(rng.below(3));
  const double amp = label == Label::benign ? rng.uniform(0.0, 0.04) : rng.uniform(0.18, 0.28);
  const double phase = rng.uniform(0.0, 2.0 * pi);
  const int spikes = label == Label::benign ? 0 : 7;
  std::vector<double> spike_at(static_cast<std::size_t>(spikes));
  for (double& a : spike_at) a = rng.uniform(0.0, 2.0 * pi);
  const double edge = label == Label::benign ? 0.12 : 0.05;

  // smooth tissue background: a few random low-frequency waves
  double wave[3][3];
  for (auto& w : wave) {
    w[0] = rng.uniform(0.5, 2.0) * 2.0 * pi / s;
    w[1] = rng.uniform(0.0, 2.0 * pi);
    w[2] = rng.uniform(0.02, 0.06);
  }

  Image img(side, side);
  const double c = std::cos(tilt), sn = std::sin(tilt);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (c * dx + sn * dy) / ax, v = (-sn * dx + c * dy) / ay;
      const double rho = std::hypot(u, v);
      const double th = std::atan2(v, u);
      double rim = 1.0 + amp * std::sin(lobes * th + phase);
      for (double a : spike_at) {
        const double d = std::remainder(th - a, 2.0 * pi);
        rim += 0.35 * std::exp(-d * d / 0.01);
      }
      const double inside = 1.0 - smoothstep(rim - edge, rim + edge, rho);
      double bg = style.background;
      for (const auto& w : wave) bg += w[2] * std::sin(w[0] * (x + 0.7 * y) + w[1]);
      img(y, x) = bg + (style.lesion - bg) * inside;
    }
  }
  for (double& p : img.pixels()) p = std::clamp(p * (1.0 + style.speckle * rng.normal()), 0.0, 1.0);
  return img;
}

Image speckled_constant(std::size_t height, std::size_t width, double level, double sigma, Rng& rng) {
  Image img(height, width);
  for (double& p : img.pixels()) p = std::clamp(level * (1.0 + sigma * rng.normal()), 0.0, 1.0);
  return img;
}

}  // namespace nstaug
