#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nstaug/featnet.hpp"

namespace nstaug {

class LrpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PoolRule {
  uniform,       // avg/global pool: R spread evenly over the window
  proportional,  // by each input's share of the window sum
};

enum class ResidualRule {
  proportional,  // a_branch / (a_a + a_b), equal split when the sum is zero
  equal,
};

/// What a conv/dense neuron does when one of its alpha-beta denominators
/// is exactly zero and epsilon is 0.
enum class DegenerateRule {
  error,   // throw, recommending epsilon > 0
  absorb,  // the empty side sends nothing; relevance is lost
  fold,    // the neuron's whole relevance goes to the non-empty side
};

struct LrpConfig {
  double alpha = 2.0;
  double beta = 1.0;
  double epsilon = 1e-9;
  PoolRule pool = PoolRule::uniform;
  ResidualRule residual = ResidualRule::proportional;
  DegenerateRule degenerate = DegenerateRule::error;

  void validate() const;
};

PoolRule parse_pool_rule(const std::string& s);
DegenerateRule parse_degenerate_rule(const std::string& s);

/// Where the explained quantity f(x) is read off and how relevance is seeded.
struct LrpTarget {
  enum class Kind { layer_sum, unit, content_loss };
  Kind kind = Kind::layer_sum;
  LayerId layer = 0;
  std::size_t unit = 0;  // flat index for Kind::unit
  Tensor reference;      // content features for Kind::content_loss

  /// R = activations of `layer`; f(x) = their sum.
  static LrpTarget layer_sum(LayerId layer);
  /// R = the single activation `unit` of `layer`.
  static LrpTarget unit_of(LayerId layer, std::size_t unit);
  /// R_k = 1/2 (a_k - ref_k)^2 at `layer`; f(x) = the content loss.
  static LrpTarget content_loss(LayerId layer, Tensor reference);
  /// Logit of class `cls`: the unit of the last dense layer.
  static LrpTarget logit(const Network& net, std::size_t cls);
};

/// Relevance held at a cut after layer `layer` has been redistributed.
struct ConservationEntry {
  LayerId layer = 0;
  double sum = 0.0;
  double relative_gap = 0.0;
};

struct RelevanceMap {
  double output = 0.0;               // f(x)
  LayerId target_layer = 0;
  std::vector<Tensor> layers;        // relevance of each layer output, up to target_layer
  Tensor pixels;                     // relevance of the network input
  std::vector<ConservationEntry> audit;
  std::size_t degenerate_neurons = 0;  // folded or absorbed

  double max_relative_gap() const;
  /// Pixel relevance or a layer's, by id; nullopt selects the pixels.
  const Tensor& at(std::optional<LayerId> layer) const;
};

/// Alpha-beta messages of a dense layer: a (in), w (out, in), r (out).
std::vector<double> lrp_dense(std::span<const double> a, const Tensor& weight, std::span<const double> r,
                              const LrpConfig& cfg, std::size_t* degenerate = nullptr);

/// Alpha-beta messages of a conv layer, input (C,H,W), weight (K,C,k,k).
Tensor lrp_conv(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding,
                const Tensor& r_out, const LrpConfig& cfg, std::size_t* degenerate = nullptr);

/// Pooling redistribution; max pooling is winner-take-all with ties shared.
Tensor lrp_pool(const Tensor& input, std::size_t window, PoolMode mode, const Tensor& r_out, const LrpConfig& cfg);

/// Global average pool: input (C,H,W), r_out (C).
Tensor lrp_global_pool(const Tensor& input, std::span<const double> r_out, const LrpConfig& cfg);

/// Backward relevance pass from `target` down to the pixels.
RelevanceMap propagate(const Network& net, const Image& image, const LrpTarget& target, const LrpConfig& cfg);
RelevanceMap propagate(const Network& net, const Activations& acts, const LrpTarget& target, const LrpConfig& cfg);

/// Channel-summed relevance as an H x W matrix, row-major.
std::vector<double> relevance_plane(const Tensor& r, std::size_t& height, std::size_t& width);

/// Diverging colormap PPM (warm positive, cool negative, white zero) and a
/// text sidecar `<out>.txt` with one matrix row per line.
void render_heatmap(const RelevanceMap& map, std::optional<LayerId> layer, const std::filesystem::path& out);

std::vector<double> read_sidecar(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

}  // namespace nstaug
