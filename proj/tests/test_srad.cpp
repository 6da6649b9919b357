#include <cmath>

#include "doctest.h"
#include "nstaug/srad.hpp"
#include "nstaug/synthetic.hpp"

using namespace nstaug;

namespace {

Image step_image(std::size_t side) {
  Image img(side, side, 0.2);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = side / 2; x < side; ++x) img(y, x) = 0.8;
  return img;
}

// Mean |I(y, s/2) - I(y, s/2 - 1)| across the edge.
double edge_gradient(const Image& img) {
  const std::size_t s = img.width() / 2;
  double g = 0.0;
  for (std::size_t y = 0; y < img.height(); ++y) g += std::abs(img(y, s) - img(y, s - 1));
  return g / static_cast<double>(img.height());
}

double mean(const Image& img) {
  double s = 0.0;
  for (double p : img.pixels()) s += p;
  return s / static_cast<double>(img.size());
}

}  // namespace

TEST_CASE("constant images are fixed points") {
  for (double level : {0.0, 0.3, 1.0}) {
    const Image c(12, 10, level);
    CHECK(srad_step(c, 0.2, 0.25) == c);
    CHECK(srad_step(c, 0.0, 0.05) == c);
  }
}

TEST_CASE("step edge is retained") {
  const Image img = step_image(16);
  const double before = edge_gradient(img);
  const Region left{0, 0, 6, 16};
  const double q0 = speckle_scale(img, left);
  const Image after = srad_step(img, q0, 0.05);
  CHECK(std::abs(edge_gradient(after) - before) <= 0.1 * before);
  const auto c = srad_coefficients(img, q0);
  CHECK(c[0] == doctest::Approx(1.0));
  CHECK(c[8] < 1e-6);
}

TEST_CASE("homogeneous speckle variance decreases") {
  Rng rng(4);
  const Image img = speckled_constant(32, 32, 0.5, 0.3, rng);
  const Region all{0, 0, 32, 32};
  const Image after = srad_step(img, speckle_scale(img, all), 0.05);
  CHECK(region_variance(after, all) < region_variance(img, all));
}

TEST_CASE("multiscale composition and counts") {
  Rng rng(5);
  const Image img = speckled_constant(16, 16, 0.4, 0.25, rng);
  SradParams p;
  p.scales = 1;
  p.iterations_per_scale = 3;
  const auto one = srad_multiscale(img, p);
  REQUIRE(one.size() == 1);
  Image manual = img;
  const Region all{0, 0, 16, 16};
  for (int i = 0; i < 3; ++i) manual = srad_step(manual, speckle_scale(manual, all), p.dt);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(one[0].pixels()[i] - manual.pixels()[i]) < 1e-12);

  p.scales = 8;
  p.iterations_per_scale = 10;
  const auto eight = srad_multiscale(img, p);
  CHECK(eight.size() == 8);
  p.scales = 1;
  p.iterations_per_scale = 30;
  CHECK(srad_multiscale(img, p)[0] == eight[2]);
}

TEST_CASE("variance across the 8 scales on the speckle suite") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const Image img = speckled_constant(32, 32, 0.5, 0.3, rng);
    SradParams p;
    p.region = Region{4, 4, 24, 24};
    const auto scales = srad_multiscale(img, p);
    double prev = region_variance(img, *p.region);
    for (const auto& s : scales) {
      const double v = region_variance(s, *p.region);
      CHECK(v <= prev);
      prev = v;
    }
    CHECK(region_variance(scales.back(), *p.region) <= 0.5 * region_variance(scales.front(), *p.region));
    CHECK(std::abs(mean(scales.back()) - mean(img)) < 0.02 * mean(img));
  }
}

TEST_CASE("lesion images keep their mean") {
  Rng rng(6);
  const Image img = synthetic_lesion(32, Label::malignant, rng);
  const auto scales = srad_multiscale(img, SradParams{});
  CHECK(std::abs(mean(scales.back()) - mean(img)) < 0.02 * mean(img));
}

TEST_CASE("parameter validation") {
  const Image img(16, 16, 0.5);
  SradParams p;
  p.dt = 0.3;
  CHECK_THROWS_AS(p.validate(img), ShapeError);
  p = SradParams{};
  p.scales = 0;
  CHECK_THROWS_AS(p.validate(img), ShapeError);
  p = SradParams{};
  p.region = Region{10, 10, 8, 8};
  CHECK_THROWS_AS(srad_multiscale(img, p), ShapeError);
  CHECK(Region::parse("1,2,3,4").w == 3);
  CHECK_THROWS_AS(Region::parse("1,2,3"), ShapeError);
  CHECK_THROWS_AS(Region::parse("1,2,-3,4"), ShapeError);
}
