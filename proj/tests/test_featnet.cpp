#include <fstream>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "nstaug/featnet.hpp"
#include "nstaug/rng.hpp"

using namespace nstaug;

namespace {

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (double& v : img.pixels()) v = rng.uniform(0.05, 0.95);
  return img;
}

Network identity_network() {
  Network net(1, {LayerSpec::conv(1, 1, 0, "id")}, 1);
  net.params()[0].weight[0] = 1.0;
  return net;
}

// Small network touching every layer kind.
std::vector<LayerSpec> mixed_layers() {
  std::vector<LayerSpec> l;
  l.push_back(LayerSpec::conv(3, 3, 1));
  l.push_back(LayerSpec::activation(LayerKind::leaky_relu, "a1", 0.1));
  l.push_back(LayerSpec::conv(3, 3, 1));
  l.push_back(LayerSpec::residual(1));
  l.push_back(LayerSpec::activation(LayerKind::relu));
  l.push_back(LayerSpec::pool(LayerKind::max_pool, 2));
  l.push_back(LayerSpec::conv(4, 3, 1));
  l.push_back(LayerSpec::activation(LayerKind::leaky_relu, "", 0.05));
  l.push_back(LayerSpec::pool(LayerKind::avg_pool, 2));
  l.push_back(LayerSpec::global_pool());
  l.push_back(LayerSpec::dense(3));
  l.push_back(LayerSpec::softmax("out"));
  return l;
}

}  // namespace

TEST_CASE("build_network determinism and validation") {
  const Network a = build_network(default_feature_layers(), 42);
  const Network b = build_network(default_feature_layers(), 42);
  const Network c = build_network(default_feature_layers(), 43);
  CHECK(a.parameter_checksum() == b.parameter_checksum());
  CHECK(a.flat_parameters() == b.flat_parameters());
  CHECK(build_network(default_feature_layers(), 1).parameter_checksum() !=
        build_network(default_feature_layers(), 2).parameter_checksum());
  CHECK(a.parameter_checksum() != c.parameter_checksum());

  CHECK_THROWS_AS(build_network({}, 1), ShapeError);

  // conv 4 channels then residual from a 2-channel layer
  std::vector<LayerSpec> bad{LayerSpec::conv(2), LayerSpec::activation(LayerKind::relu), LayerSpec::conv(4),
                             LayerSpec::residual(0)};
  try {
    build_network(bad, 1);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layer 3") != std::string::npos);
  }
  CHECK_THROWS_AS(build_network({LayerSpec::dense(2)}, 1), ShapeError);
}

TEST_CASE("default architecture shape") {
  const Network net = build_network(default_feature_layers(), 7);
  bool has_residual = false;
  for (const auto& l : net.layers()) has_residual |= l.kind == LayerKind::residual_add;
  CHECK(has_residual);
  const Image img = random_image(16, 16, 1);
  std::set<LayerId> ids;
  for (const auto& n : kDefaultStyleLayers) ids.insert(net.find(n));
  const FeatureStack fs = extract_features(net, img, ids);
  CHECK(fs.channels(net.find("stage1")) == 8);
  CHECK(fs.spatial(net.find("stage1")) == 256);
  CHECK(fs.channels(net.find("stage2")) == 16);
  CHECK(fs.spatial(net.find("stage3")) == 16);
  CHECK(fs.channels(net.find("stage4")) == 32);
  CHECK(fs.spatial(net.find("stage4")) == 4);
  for (LayerId id : ids) {
    CHECK(fs.at(id).dim(0) == fs.channels(id));
    CHECK(fs.at(id).size() == fs.channels(id) * fs.spatial(id));
  }
  CHECK_THROWS_AS(extract_features(net, img, {999}), ShapeError);
  CHECK_THROWS_AS(net.find("nope"), ShapeError);
}

TEST_CASE("identity and zero networks") {
  const Network id = identity_network();
  const Image img = random_image(8, 8, 3);
  const FeatureStack fs = extract_features(id, img, {0});
  CHECK(fs.at(0).values() == img.pixels());

  const Network net = build_network(default_feature_layers(), 5);  // biases start at zero
  const Activations acts = net.forward(Image(16, 16, 0.0).to_tensor());
  for (const Tensor& t : acts.outputs)
    for (double v : t.values()) CHECK(v == 0.0);
}

TEST_CASE("forward is deterministic and residual adds exactly") {
  const Network net = build_network(default_feature_layers(), 9);
  Network perturbed = net;
  auto flat = perturbed.flat_parameters();
  for (double& v : flat) v += 0.01;  // non-zero biases too
  perturbed.set_flat_parameters(flat);

  const Image img = random_image(16, 16, 10);
  const Activations a = perturbed.forward(img.to_tensor());
  const Activations b = perturbed.forward(img.to_tensor());
  for (std::size_t i = 0; i < a.outputs.size(); ++i) CHECK(a.outputs[i] == b.outputs[i]);

  const LayerId res = perturbed.find("res3");
  const Tensor& sum = a.outputs[res];
  for (std::size_t k = 0; k < sum.size(); ++k) {
    CHECK(sum[k] == a.outputs[res - 1][k] + a.outputs[perturbed.layers()[res].skip_from][k]);
  }
}

TEST_CASE("backward trivial cases") {
  const Network net = build_network(default_feature_layers(), 2);
  const Image img = random_image(16, 16, 4);
  const Activations acts = net.forward(img.to_tensor());
  const LayerId top = net.find("stage4");
  const Gradients g = net.backward(acts, {{top, Tensor(acts.outputs[top].shape())}});
  for (double v : g.pixels.values()) CHECK(v == 0.0);
  for (double v : g.params) CHECK(v == 0.0);

  const Network id = identity_network();
  const Activations ia = id.forward(img.to_tensor());
  Rng rng(8);
  Tensor up(ia.outputs[0].shape());
  for (double& v : up.values()) v = rng.normal();
  CHECK(id.backward(ia, {{0, up}}).pixels == up);

  CHECK_THROWS_AS(net.backward(acts, {{top, Tensor({1, 2, 2})}}), ShapeError);
}

TEST_CASE("backward matches central finite differences") {
  Network net = build_network(mixed_layers(), 17);
  {
    auto flat = net.flat_parameters();
    Rng rng(18);
    for (double& v : flat) v += 0.05 * rng.normal();
    net.set_flat_parameters(flat);
  }
  const Image img = random_image(8, 8, 19);
  Rng rng(20);

  // Loss = <u, out_top> + <v, out_mid>, exercising multi-layer upstream seeds.
  const LayerId top = net.find("out");
  const LayerId mid = net.find("a1");
  const Activations acts = net.forward(img.to_tensor());
  Tensor u(acts.outputs[top].shape()), v(acts.outputs[mid].shape());
  for (double& x : u.values()) x = rng.normal();
  for (double& x : v.values()) x = rng.normal();

  auto loss_at = [&](const Network& n, const Tensor& input) {
    const Activations a = n.forward(input);
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * a.outputs[top][i];
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * a.outputs[mid][i];
    return s;
  };
  const Gradients g = net.backward(acts, {{top, u}, {mid, v}});

  std::vector<std::size_t> pixel_coords(img.size());
  std::iota(pixel_coords.begin(), pixel_coords.end(), 0);
  const auto pix = testing::finite_difference_check(
      [&](const std::vector<double>& x) { return loss_at(net, Tensor({1, 8, 8}, x)); }, img.pixels(),
      g.pixels.values(), pixel_coords);
  CHECK(pix.pass_fraction() >= 0.99);

  std::vector<std::size_t> param_coords(net.parameter_count());
  std::iota(param_coords.begin(), param_coords.end(), 0);
  const auto par = testing::finite_difference_check(
      [&](const std::vector<double>& p) {
        Network copy = net;
        copy.set_flat_parameters(p);
        return loss_at(copy, img.to_tensor());
      },
      net.flat_parameters(), g.params, param_coords);
  CHECK(par.pass_fraction() >= 0.99);
}

TEST_CASE("weight file round trip") {
  Network net = build_network(default_feature_layers(LayerKind::leaky_relu), 99);
  const auto path = std::filesystem::temp_directory_path() / "nstaug_weights_test.bin";
  save_weights(net, path);
  const Network back = load_weights(path);
  CHECK(back.layers() == net.layers());
  CHECK(back.parameter_checksum() == net.parameter_checksum());

  // Corrupt one parameter byte: checksum must catch it.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-20, std::ios::end);
    char c = 0x5a;
    f.write(&c, 1);
  }
  CHECK_THROWS_AS(load_weights(path), IoError);
  std::filesystem::remove(path);
}
