#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "nstaug/lrp.hpp"
#include "nstaug/synthetic.hpp"

using namespace nstaug;
namespace fs = std::filesystem;

namespace {

LrpConfig exact(double alpha = 2.0, double beta = 1.0) {
  LrpConfig c;
  c.alpha = alpha;
  c.beta = beta;
  c.epsilon = 0.0;
  c.degenerate = DegenerateRule::fold;
  return c;
}

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace

TEST_CASE("dense alpha-beta hand example") {
  const Tensor w({1, 2}, {2.0, 3.0});
  const std::vector<double> a = {1.0, 1.0}, r = {5.0};
  LrpConfig cfg = exact(1.0, 0.0);
  const auto out = lrp_dense(a, w, r, cfg);
  CHECK(out[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(out[1] == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("all-negative weights with alpha=1, beta=0") {
  const Tensor w({1, 3}, {-1.0, -2.0, -0.5});
  const std::vector<double> a = {1.0, 2.0, 3.0}, r = {4.0};
  LrpConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = 0.0;
  std::size_t deg = 0;
  const auto stab = lrp_dense(a, w, r, cfg, &deg);
  for (double v : stab) CHECK(v == 0.0);
  CHECK(deg == 1);

  cfg.epsilon = 0.0;
  cfg.degenerate = DegenerateRule::error;
  try {
    lrp_dense(a, w, r, cfg);
    FAIL("expected a zero-denominator diagnostic");
  } catch (const LrpError& e) {
    CHECK(std::string(e.what()).find("epsilon > 0") != std::string::npos);
  }
  cfg.degenerate = DegenerateRule::absorb;
  for (double v : lrp_dense(a, w, r, cfg)) CHECK(v == 0.0);
  cfg.degenerate = DegenerateRule::fold;
  const auto folded = lrp_dense(a, w, r, cfg);
  CHECK(folded[0] + folded[1] + folded[2] == doctest::Approx(4.0));
}

TEST_CASE("config validation") {
  LrpConfig c;
  c.alpha = 2.0;
  c.beta = 2.0;
  CHECK_THROWS_AS(c.validate(), ShapeError);
  c.alpha = 3.0;
  CHECK_NOTHROW(c.validate());
  c.epsilon = -1.0;
  CHECK_THROWS_AS(c.validate(), ShapeError);
}

TEST_CASE("conv layer conserves relevance") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor in = random_tensor({4, 6, 6}, rng);
    const Tensor w = random_tensor({5, 4, 3, 3}, rng);
    for (std::size_t pad : {0u, 1u}) {
      const std::size_t o = 6 + 2 * pad - 2;
      const Tensor r = random_tensor({5, o, o}, rng, 0.0, 1.0);
      std::size_t deg = 0;
      const Tensor back = lrp_conv(in, w, 1, pad, r, exact(), &deg);
      CHECK(deg == 0);
      CHECK(rel(back.sum(), r.sum()) < 1e-8);

      // linear in the upstream relevance
      Tensor r3 = r;
      for (double& v : r3.values()) v *= 3.0;
      const Tensor back3 = lrp_conv(in, w, 1, pad, r3, exact());
      for (std::size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back3[i] - 3.0 * back[i]) <= 1e-12 * (1 + std::abs(back[i])));
    }
  }
  CHECK_THROWS_AS(lrp_conv(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), 1, 1, Tensor({1, 4, 4}), exact()), ShapeError);
}

TEST_CASE("pool relevance") {
  const LrpConfig cfg = exact();
  SUBCASE("avg-pool of a constant region is uniform") {
    const Tensor in({1, 2, 2}, 0.7);
    const Tensor back = lrp_pool(in, 2, PoolMode::avg, Tensor({1, 1, 1}, {4.0}), cfg);
    for (double v : back.values()) CHECK(v == 1.0);
  }
  SUBCASE("max-pool winner takes all, ties split") {
    const Tensor in({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    const Tensor back = lrp_pool(in, 2, PoolMode::max, Tensor({1, 1, 1}, {6.0}), cfg);
    CHECK(back.values() == std::vector<double>{0.0, 0.0, 0.0, 6.0});
    const Tensor tie({1, 2, 2}, {4.0, 2.0, 3.0, 4.0});
    const Tensor tb = lrp_pool(tie, 2, PoolMode::max, Tensor({1, 1, 1}, {6.0}), cfg);
    CHECK(tb.values() == std::vector<double>{3.0, 0.0, 0.0, 3.0});
  }
  SUBCASE("random windows conserve") {
    Rng rng(8);
    const Tensor in = random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    const Tensor r = random_tensor({3, 4, 4}, rng);
    for (PoolMode m : {PoolMode::max, PoolMode::avg}) {
      CHECK(rel(lrp_pool(in, 2, m, r, cfg).sum(), r.sum()) < 1e-12);
    }
    LrpConfig prop = cfg;
    prop.pool = PoolRule::proportional;
    CHECK(rel(lrp_pool(in, 2, PoolMode::avg, r, prop).sum(), r.sum()) < 1e-12);
    const std::vector<double> g = {1.0, -2.0, 0.5};
    CHECK(rel(lrp_global_pool(in, g, cfg).sum(), -0.5) < 1e-12);
  }
}

TEST_CASE("identity network passes relevance straight through") {
  Network net = build_network({LayerSpec::conv(1, 1, 0, "id")}, 1);
  net.params()[0].weight = Tensor({1, 1, 1, 1}, {1.0});
  net.params()[0].bias = {0.0};
  Rng rng(2);
  Image img(8, 8);
  for (double& p : img.pixels()) p = rng.uniform(0.1, 1.0);
  const auto m = propagate(net, img, LrpTarget::layer_sum(0), exact(1.0, 0.0));
  CHECK(m.output == doctest::Approx(img.to_tensor().sum()).epsilon(1e-14));
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(m.pixels[i] == doctest::Approx(img.pixels()[i]).epsilon(1e-14));
  CHECK(m.max_relative_gap() < 1e-14);
}

TEST_CASE("zero image through a bias-free network") {
  auto layers = default_feature_layers();
  for (auto& l : layers) l.bias = false;
  const Network net = build_network(layers, 5);
  const auto m = propagate(net, Image(16, 16, 0.0), LrpTarget::layer_sum(net.find("stage4")), exact());
  CHECK(m.output == 0.0);
  for (const auto& t : m.layers)
    for (double v : t.values()) CHECK(v == 0.0);
  for (double v : m.pixels.values()) CHECK(v == 0.0);
}

TEST_CASE("default network conserves relevance at every cut") {
  const Network net = build_network(default_feature_layers(), 1);
  Rng rng(17);
  for (int i = 0; i < 5; ++i) {
    const Image img = synthetic_lesion(16, i % 2 ? Label::benign : Label::malignant, rng);
    const auto m = propagate(net, img, LrpTarget::layer_sum(net.find("stage4")), exact());
    CHECK(m.audit.size() == net.find("stage4") + 1);
    CHECK(m.max_relative_gap() < 1e-6);
    CHECK(rel(m.pixels.sum(), m.output) < 1e-6);

    const Tensor ref = net.forward(synthetic_lesion(16, Label::benign, rng).to_tensor()).outputs[net.find("stage3")];
    const auto c = propagate(net, img, LrpTarget::content_loss(net.find("stage3"), ref), exact());
    CHECK(c.output > 0.0);
    CHECK(c.max_relative_gap() < 1e-6);
  }
}

TEST_CASE("nonnegative network and inputs give nonnegative relevance") {
  Network net = build_network(default_feature_layers(), 9);
  for (auto& p : net.params())
    for (double& v : p.weight.values()) v = std::abs(v);
  Rng rng(1);
  const Image img = synthetic_lesion(16, Label::malignant, rng);
  LrpConfig cfg = exact(1.0, 0.0);
  const auto m = propagate(net, img, LrpTarget::layer_sum(net.find("stage4")), cfg);
  for (const auto& t : m.layers)
    for (double v : t.values()) CHECK(v >= 0.0);
  for (double v : m.pixels.values()) CHECK(v >= 0.0);
}

TEST_CASE("logit target through a classifier head") {
  auto layers = default_feature_layers(LayerKind::leaky_relu);
  layers.push_back(LayerSpec::global_pool("gap"));
  layers.push_back(LayerSpec::dense(2, "logits"));
  layers.push_back(LayerSpec::softmax("prob"));
  const Network net = build_network(layers, 4);
  Rng rng(6);
  const Image img = synthetic_lesion(16, Label::benign, rng);
  const auto t = LrpTarget::logit(net, 1);
  CHECK(t.layer == net.find("logits"));
  const auto m = propagate(net, img, t, exact());
  CHECK(m.output == net.forward(img.to_tensor()).outputs[t.layer][1]);
  CHECK(m.max_relative_gap() < 1e-6);
  CHECK_THROWS_AS(LrpTarget::logit(net, 2), ShapeError);
  CHECK_THROWS_AS(LrpTarget::logit(build_network(default_feature_layers(), 1), 0), ShapeError);
}

TEST_CASE("heatmap rendering") {
  const fs::path dir = fs::temp_directory_path() / "nstaug_test_lrp";
  fs::remove_all(dir);
  fs::create_directories(dir);
  RelevanceMap m;
  m.pixels = Tensor({1, 8, 8});
  std::size_t h = 0, w = 0;

  render_heatmap(m, std::nullopt, dir / "zero.ppm");
  for (const Rgb& p : read_ppm(dir / "zero.ppm", h, w)) CHECK(p == Rgb{255, 255, 255});

  m.pixels.at(0, 3, 5) = 2.5;
  render_heatmap(m, std::nullopt, dir / "one.ppm");
  const auto px = read_ppm(dir / "one.ppm", h, w);
  CHECK(h == 8);
  CHECK(w == 8);
  for (std::size_t i = 0; i < px.size(); ++i) CHECK(px[i] == (i == 3 * 8 + 5 ? Rgb{255, 0, 0} : Rgb{255, 255, 255}));

  m.pixels.at(0, 0, 0) = -2.5;
  render_heatmap(m, std::nullopt, dir / "two.ppm");
  CHECK(read_ppm(dir / "two.ppm", h, w)[0] == Rgb{0, 0, 255});

  const Network net = build_network(default_feature_layers(), 1);
  Rng rng(3);
  const auto rm = propagate(net, synthetic_lesion(16, Label::benign, rng), LrpTarget::layer_sum(net.find("stage3")),
                            LrpConfig{});
  render_heatmap(rm, std::nullopt, dir / "real.ppm");
  const auto side = read_sidecar(dir / "real.ppm.txt", h, w);
  REQUIRE(side.size() == 256);
  CHECK(h == 16);
  for (std::size_t i = 0; i < side.size(); ++i) CHECK(side[i] == rm.pixels[i]);
  render_heatmap(rm, net.find("stage1"), dir / "stage1.ppm");
  CHECK(fs::exists(dir / "stage1.ppm.txt"));
  fs::remove_all(dir);
}
