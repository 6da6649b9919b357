#include <filesystem>

#include "doctest.h"
#include "nstaug/image.hpp"
#include "nstaug/rng.hpp"
#include "nstaug/tensor.hpp"

using namespace nstaug;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Direct evaluation of a[i,j,k] = sum_m sum_n sum_c w[m,n,c,k] a[i+m-1, j+n-1, c] + b_k
// over an explicitly zero-padded copy of the input.
Tensor conv_oracle(const Tensor& in, const Tensor& w, const std::vector<double>& b, std::size_t stride,
                   std::size_t pad) {
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  std::vector<std::vector<std::vector<double>>> padded(
      C, std::vector<std::vector<double>>(H + 2 * pad, std::vector<double>(W + 2 * pad, 0.0)));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) padded[c][y + pad][x + pad] = in.at(c, y, x);
  const std::size_t oh = (H + 2 * pad - kh) / stride + 1, ow = (W + 2 * pad - kw) / stride + 1;
  Tensor out({K, oh, ow});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = b[k];
        for (std::size_t m = 0; m < kh; ++m)
          for (std::size_t n = 0; n < kw; ++n)
            for (std::size_t c = 0; c < C; ++c)
              s += w[((k * C + c) * kh + m) * kw + n] * padded[c][i * stride + m][j * stride + n];
        out.at(k, i, j) = s;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d identity kernel is the identity map") {
  Tensor in({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor k({1, 1, 1, 1}, {1.0});
  std::vector<double> bias{0.0};
  CHECK(conv2d(in, k, bias, 1, 0) == in);
}

TEST_CASE("conv2d of a zero input yields the bias") {
  Rng rng(3);
  Tensor in({2, 4, 4});
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  std::vector<double> bias{0.5, -1.25, 2.0};
  const Tensor out = conv2d(in, k, bias, 1, 1);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 16; ++i) CHECK(out[c * 16 + i] == bias[c]);
}

TEST_CASE("conv2d matches the quadruple-loop oracle") {
  Rng rng(11);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1, 2}) {
      Tensor in = random_tensor({2, 5, 5}, rng);
      Tensor k = random_tensor({3, 2, 3, 3}, rng);
      std::vector<double> bias{rng.uniform(), rng.uniform(), rng.uniform()};
      const Tensor got = conv2d(in, k, bias, stride, pad);
      const Tensor want = conv_oracle(in, k, bias, stride, pad);
      REQUIRE(got.shape() == want.shape());
      CHECK(got.dim(1) == (5 + 2 * pad - 3) / stride + 1);
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-13));
    }
  }
}

TEST_CASE("conv2d is linear in its input") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({2, 6, 6}, rng), y = random_tensor({2, 6, 6}, rng);
    Tensor k = random_tensor({4, 2, 3, 3}, rng);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    const Tensor combo = elementwise(ElementOp::add, elementwise(ElementOp::mul, x, a), elementwise(ElementOp::mul, y, b));
    const Tensor lhs = conv2d(combo, k, {}, 1, 1);
    const Tensor cx = conv2d(x, k, {}, 1, 1), cy = conv2d(y, k, {}, 1, 1);
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      const double rhs = a * cx[i] + b * cy[i];
      CHECK(std::abs(lhs[i] - rhs) <= 1e-10 * std::max(1.0, std::abs(rhs)));
    }
  }
}

TEST_CASE("conv2d rejects mismatched shapes naming both") {
  Tensor in({2, 4, 4});
  Tensor k({1, 3, 3, 3});
  try {
    conv2d(in, k, {}, 1, 1);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2x4x4)") != std::string::npos);
    CHECK(msg.find("(1x3x3x3)") != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d(in, Tensor({1, 2, 3, 3}), {}, 0, 1), ShapeError);
}

TEST_CASE("elementwise definitions") {
  Tensor v({3}, {-1, 0, 2});
  CHECK(relu(v).values() == std::vector<double>{0, 0, 2});
  CHECK(elementwise(ElementOp::max, Tensor({2}, {1, 4}), Tensor({2}, {3, 2})).values() == std::vector<double>{3, 4});
  CHECK(leaky_relu(v, 0.01).values() == std::vector<double>{-0.01, 0, 2});
  CHECK_THROWS_AS(elementwise(ElementOp::add, Tensor({2}), Tensor({3})), ShapeError);
}

TEST_CASE("elementwise matches a scalar loop") {
  Rng rng(9);
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 3, 4}, rng);
  const Tensor sum = elementwise(ElementOp::add, a, b), diff = elementwise(ElementOp::sub, a, b);
  const Tensor prod = elementwise(ElementOp::mul, a, b), mx = elementwise(ElementOp::max, a, b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(sum[i] == a[i] + b[i]);
    CHECK(diff[i] == a[i] - b[i]);
    CHECK(prod[i] == a[i] * b[i]);
    CHECK(mx[i] == (a[i] > b[i] ? a[i] : b[i]));
  }
}

TEST_CASE("pooling") {
  Tensor sq({1, 2, 2}, {1, 2, 3, 4});
  CHECK(pool2d(sq, 2, PoolMode::max).values() == std::vector<double>{4});
  CHECK(pool2d(sq, 2, PoolMode::avg).values() == std::vector<double>{2.5});

  Tensor constant({2, 4, 4}, 0.7);
  const Tensor cmax = pool2d(constant, 2, PoolMode::max), cavg = pool2d(constant, 2, PoolMode::avg);
  for (double v : cmax.values()) CHECK(v == 0.7);
  for (double v : cavg.values()) CHECK(v == doctest::Approx(0.7));
  for (double v : global_avg_pool(constant)) CHECK(v == doctest::Approx(0.7));

  CHECK_THROWS_AS(pool2d(sq, 3, PoolMode::max), ShapeError);
  CHECK_THROWS_AS(pool2d(Tensor({1, 3, 4}), 2, PoolMode::avg), ShapeError);

  Rng rng(21);
  Tensor r = random_tensor({3, 6, 6}, rng);
  const Tensor mx = pool2d(r, 3, PoolMode::max), av = pool2d(r, 3, PoolMode::avg);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double m = -1e300, s = 0;
        for (std::size_t y = 3 * i; y < 3 * i + 3; ++y)
          for (std::size_t x = 3 * j; x < 3 * j + 3; ++x) {
            m = std::max(m, r.at(c, y, x));
            s += r.at(c, y, x);
          }
        CHECK(mx.at(c, i, j) == m);
        CHECK(av.at(c, i, j) == doctest::Approx(s / 9).epsilon(1e-14));
      }
}

TEST_CASE("operations leave inputs unmodified") {
  Rng rng(4);
  Tensor a = random_tensor({2, 4, 4}, rng);
  const Tensor copy = a;
  (void)relu(a);
  (void)pool2d(a, 2, PoolMode::max);
  (void)conv2d(a, random_tensor({1, 2, 3, 3}, rng), {}, 1, 1);
  CHECK(a == copy);
}

TEST_CASE("pgm round trip and image invariants") {
  Image img(8, 9);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels()[i] = static_cast<double>(i % 256) / 255.0;
  const auto path = std::filesystem::temp_directory_path() / "nstaug_test_roundtrip.pgm";
  write_pgm(img, path);
  const Image back = read_pgm(path);
  CHECK(back.height() == 8);
  CHECK(back.width() == 9);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(back.pixels()[i] == doctest::Approx(img.pixels()[i]));
  std::filesystem::remove(path);

  CHECK_NOTHROW(img.validate());
  CHECK_THROWS_AS(Image(7, 8).validate(), ShapeError);
  Image bad(8, 8);
  bad(0, 0) = 1.5;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  CHECK_THROWS_AS(read_pgm("/nonexistent/x.pgm"), IoError);
}
