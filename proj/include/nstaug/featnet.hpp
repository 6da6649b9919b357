#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "nstaug/image.hpp"
#include "nstaug/tensor.hpp"

namespace nstaug {

enum class LayerKind : std::uint32_t {
  conv = 0,
  relu = 1,
  leaky_relu = 2,
  max_pool = 3,
  avg_pool = 4,
  residual_add = 5,
  global_pool = 6,
  dense = 7,
  softmax = 8,
};

std::string_view layer_kind_name(LayerKind kind);

using LayerId = std::size_t;

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::size_t out_channels = 0;  // conv filters or dense units
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t window = 2;     // pooling
  LayerId skip_from = 0;      // residual_add: earlier layer whose output is added
  double slope = 0.01;        // leaky_relu
  bool bias = true;

  static LayerSpec conv(std::size_t out_channels, std::size_t kernel = 3, std::size_t padding = 1,
                        std::string name = {});
  static LayerSpec activation(LayerKind kind, std::string name = {}, double slope = 0.01);
  static LayerSpec pool(LayerKind kind, std::size_t window, std::string name = {});
  static LayerSpec residual(LayerId skip_from, std::string name = {});
  static LayerSpec global_pool(std::string name = {});
  static LayerSpec dense(std::size_t units, std::string name = {});
  static LayerSpec softmax(std::string name = {});

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Weights and bias of one parameterized layer. Conv weights are
/// (out, in, k, k); dense weights are (out, in).
struct LayerParams {
  Tensor weight;
  std::vector<double> bias;
};

/// All layer outputs of one forward pass; outputs[i] is layer i's output.
struct Activations {
  Tensor input;
  std::vector<Tensor> outputs;

  const Tensor& input_of(LayerId id) const { return id == 0 ? input : outputs[id - 1]; }
};

struct Gradients {
  Tensor pixels;               // same shape as the network input
  std::vector<double> params;  // flat, ordered like Network::flat_parameters()
};

/// Per-layer activations with their channel count N_l and spatial size M_l.
class FeatureStack {
 public:
  void insert(LayerId id, Tensor activation);
  bool contains(LayerId id) const { return maps_.count(id) != 0; }
  const Tensor& at(LayerId id) const;
  std::size_t channels(LayerId id) const;  // N_l
  std::size_t spatial(LayerId id) const;   // M_l = H_l * W_l
  std::set<LayerId> layers() const;

 private:
  struct Entry {
    Tensor activation;
    std::size_t n = 0;
    std::size_t m = 0;
  };
  std::map<LayerId, Entry> maps_;
};

/// Feed-forward network with optional residual junctions, manual backprop,
/// and deterministic He-scaled initialization.
class Network {
 public:
  /// Validates the layer chain and initializes weights from `seed`.
  Network(std::size_t input_channels, std::vector<LayerSpec> layers, std::uint64_t seed);

  std::size_t input_channels() const { return input_channels_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t layer_count() const { return layers_.size(); }
  const std::vector<LayerParams>& params() const { return params_; }
  std::vector<LayerParams>& params() { return params_; }

  /// Looks a layer up by name; throws ShapeError if unknown.
  LayerId find(std::string_view name) const;
  std::optional<LayerId> try_find(std::string_view name) const;

  std::size_t parameter_count() const;
  std::vector<double> flat_parameters() const;
  void set_flat_parameters(std::span<const double> flat);
  std::uint64_t parameter_checksum() const;

  Activations forward(const Tensor& input) const;

  /// Reverse-mode pass. `upstream` maps layer ids to dLoss/dOutput of that
  /// layer; contributions from several layers are summed.
  Gradients backward(const Activations& acts, const std::map<LayerId, Tensor>& upstream,
                     bool with_params = true) const;

 private:
  std::size_t input_channels_;
  std::vector<LayerSpec> layers_;
  std::vector<LayerParams> params_;  // one entry per layer, empty for parameterless ones
};

/// Convolutional stack: 4 stages of 8/16/16/32 3x3 filters, 2x average
/// pooling between stages and one residual block in stage 3. Stage outputs
/// are named "stage1".."stage4".
std::vector<LayerSpec> default_feature_layers(LayerKind activation = LayerKind::relu, double slope = 0.01);

inline const std::vector<std::string> kDefaultStyleLayers = {"stage1", "stage2", "stage3", "stage4"};
inline const std::string kDefaultContentLayer = "stage3";

Network build_network(std::vector<LayerSpec> layers, std::uint64_t seed, std::size_t input_channels = 1);

FeatureStack extract_features(const Network& net, const Image& image, const std::set<LayerId>& layers);
FeatureStack features_from(const Activations& acts, const std::set<LayerId>& layers);

/// Weight file: "NSTAUGW1", input channels, layer count, per-layer spec
/// records, parameter count, row-major float64 parameters, FNV-1a trailer.
void save_weights(const Network& net, const std::filesystem::path& path);
Network load_weights(const std::filesystem::path& path);

}  // namespace nstaug
