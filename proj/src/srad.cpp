#include "nstaug/srad.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nstaug {

Region Region::parse(const std::string& s) {
  Region r;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream in(s);
  long long v[4];
  if (!(in >> v[0] >> c1 >> v[1] >> c2 >> v[2] >> c3 >> v[3]) || c1 != ',' || c2 != ',' || c3 != ',' ||
      !(in >> std::ws).eof()) {
    throw ShapeError("region '" + s + "': expected x,y,w,h");
  }
  for (long long x : v) {
    if (x < 0) throw ShapeError("region '" + s + "': negative value");
  }
  r.x = static_cast<std::size_t>(v[0]);
  r.y = static_cast<std::size_t>(v[1]);
  r.w = static_cast<std::size_t>(v[2]);
  r.h = static_cast<std::size_t>(v[3]);
  return r;
}

void Region::validate(const Image& image) const {
  if (w == 0 || h == 0) throw ShapeError("region is empty");
  if (x + w > image.width() || y + h > image.height()) {
    throw ShapeError("region " + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(w) + "," +
                     std::to_string(h) + " lies outside the " + std::to_string(image.height()) + "x" +
                     std::to_string(image.width()) + " image");
  }
}

void SradParams::validate(const Image& image) const {
  if (iterations_per_scale < 1) throw ShapeError("srad: iterations per scale must be >= 1");
  if (scales < 1) throw ShapeError("srad: scale count must be >= 1");
  if (!(dt > 0.0 && dt <= 0.25)) throw ShapeError("srad: dt must lie in (0, 0.25]");
  if (region) region->validate(image);
}

namespace {

struct Field {
  std::size_t h, w;
  std::vector<double> v;
  double at(std::ptrdiff_t y, std::ptrdiff_t x) const {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return v[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  }
};

Region full(const Image& img) { return {0, 0, img.width(), img.height()}; }

double field_scale(const Field& f, const Region& r) {
  double sum = 0.0, sq = 0.0;
  for (std::size_t y = r.y; y < r.y + r.h; ++y)
    for (std::size_t x = r.x; x < r.x + r.w; ++x) sum += f.v[y * f.w + x];
  const double n = static_cast<double>(r.w * r.h);
  const double mean = sum / n;
  for (std::size_t y = r.y; y < r.y + r.h; ++y)
    for (std::size_t x = r.x; x < r.x + r.w; ++x) sq += std::pow(f.v[y * f.w + x] - mean, 2);
  return std::sqrt(sq / n) / mean;
}

std::vector<double> coefficients(const Field& f, double q0) {
  const double q02 = std::max(q0 * q0, 1e-12);
  std::vector<double> c(f.v.size());
  for (std::size_t y = 0; y < f.h; ++y) {
    for (std::size_t x = 0; x < f.w; ++x) {
      const auto yy = static_cast<std::ptrdiff_t>(y), xx = static_cast<std::ptrdiff_t>(x);
      const double i = f.at(yy, xx);
      const double dn = f.at(yy + 1, xx) - i, ds = i - f.at(yy - 1, xx);
      const double de = f.at(yy, xx + 1) - i, dw = i - f.at(yy, xx - 1);
      const double g2 = (dn * dn + ds * ds + de * de + dw * dw) / (i * i);
      const double l = (dn - ds + de - dw) / i;
      const double q2 = (0.5 * g2 - l * l / 16.0) / std::pow(1.0 + 0.25 * l, 2);
      const double cv = 1.0 / (1.0 + (q2 - q02) / (q02 * (1.0 + q02)));
      c[y * f.w + x] = std::isfinite(cv) ? std::clamp(cv, 0.0, 1.0) : 0.0;
    }
  }
  return c;
}

void step_field(Field& f, double q0, double dt) {
  const std::vector<double> c = coefficients(f, q0);
  std::vector<double> out(f.v.size());
  auto cat = [&](std::size_t y, std::size_t x) { return c[y * f.w + x]; };
  for (std::size_t y = 0; y < f.h; ++y) {
    for (std::size_t x = 0; x < f.w; ++x) {
      const auto yy = static_cast<std::ptrdiff_t>(y), xx = static_cast<std::ptrdiff_t>(x);
      const double i = f.at(yy, xx);
      // each edge carries the coefficient of its lower/right pixel, so the
      // flux is antisymmetric and the mean is preserved
      const double cs = y + 1 < f.h ? cat(y + 1, x) : 0.0;
      const double ce = x + 1 < f.w ? cat(y, x + 1) : 0.0;
      const double c0 = cat(y, x);
      const double div = cs * (f.at(yy + 1, xx) - i) + c0 * (f.at(yy - 1, xx) - i) + ce * (f.at(yy, xx + 1) - i) +
                         c0 * (f.at(yy, xx - 1) - i);
      out[y * f.w + x] = i + dt * div;
    }
  }
  f.v = std::move(out);
}

Field shifted(const Image& img) {
  Field f{img.height(), img.width(), img.pixels()};
  for (double& p : f.v) {
    p += kSradShift;
    if (!(p > 0.0) || !std::isfinite(p)) throw ShapeError("srad: nonpositive pixel after shift");
  }
  return f;
}

// Applies the accumulated change to the unshifted pixels, so untouched
// pixels come back bit-identical.
Image unshifted(const Field& f, const Field& start, const Image& orig) {
  Image out(f.h, f.w);
  for (std::size_t i = 0; i < f.v.size(); ++i) {
    if (!std::isfinite(f.v[i])) throw ShapeError("srad: non-finite pixel");
    out.pixels()[i] = std::clamp(orig.pixels()[i] + (f.v[i] - start.v[i]), 0.0, 1.0);
  }
  return out;
}

}  // namespace

double speckle_scale(const Image& image, const Region& region) {
  region.validate(image);
  return field_scale(shifted(image), region);
}

Image srad_step(const Image& image, double q0, double dt) {
  image.validate();
  if (!(dt > 0.0 && dt <= 0.25)) throw ShapeError("srad: dt must lie in (0, 0.25]");
  if (!std::isfinite(q0) || q0 < 0.0) throw ShapeError("srad: q0 must be finite and >= 0");
  const Field start = shifted(image);
  Field f = start;
  step_field(f, q0, dt);
  return unshifted(f, start, image);
}

std::vector<double> srad_coefficients(const Image& image, double q0) { return coefficients(shifted(image), q0); }

std::vector<Image> srad_multiscale(const Image& image, const SradParams& params) {
  image.validate();
  params.validate(image);
  const Region r = params.region.value_or(full(image));
  const Field start = shifted(image);
  Field f = start;
  std::vector<Image> out;
  for (std::size_t s = 0; s < params.scales; ++s) {
    for (std::size_t it = 0; it < params.iterations_per_scale; ++it) step_field(f, field_scale(f, r), params.dt);
    out.push_back(unshifted(f, start, image));
  }
  return out;
}

double region_mean(const Image& image, const Region& region) {
  region.validate(image);
  double s = 0.0;
  for (std::size_t y = region.y; y < region.y + region.h; ++y)
    for (std::size_t x = region.x; x < region.x + region.w; ++x) s += image(y, x);
  return s / static_cast<double>(region.w * region.h);
}

double region_variance(const Image& image, const Region& region) {
  const double m = region_mean(image, region);
  double s = 0.0;
  for (std::size_t y = region.y; y < region.y + region.h; ++y)
    for (std::size_t x = region.x; x < region.x + region.w; ++x) s += std::pow(image(y, x) - m, 2);
  return s / static_cast<double>(region.w * region.h);
}

}  // namespace nstaug
