#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "nstaug/featnet.hpp"
#include "nstaug/styleloss.hpp"

namespace nstaug {

enum class InitMode { content_copy, noise };
enum class ClampMode { every_step, final_only };

struct NstConfig {
  std::size_t iterations = 1000;
  double initial_step = 1.0;
  double step_growth = 1.5;   // after an accepted step
  double step_shrink = 0.5;   // per rejected trial
  double min_step = 1e-30;    // underflow threshold
  LossWeights weights;        // layer_weights filled from style_layers when empty
  std::vector<std::string> style_layers = kDefaultStyleLayers;
  std::string content_layer = kDefaultContentLayer;
  double layer_weight = 1.0;  // w_l for every style layer
  InitMode init = InitMode::content_copy;
  ClampMode clamp = ClampMode::every_step;
  std::uint64_t seed = 0;

  void validate() const;
  /// Weights with w_l keyed by the layer ids of `net`.
  LossWeights resolved_weights(const Network& net) const;
};

struct LossRecord {
  std::size_t iteration = 0;  // 0 is the initial image
  double content = 0.0;
  double style = 0.0;
  double total = 0.0;
};

struct StylizeResult {
  Image image;
  std::vector<LossRecord> trace;  // trace[0] initial, then one per iteration
  const LossRecord& initial() const { return trace.front(); }
  const LossRecord& final() const { return trace.back(); }
};

/// Raised when the loss turns non-finite or the step underflows; carries
/// the trace recorded so far.
class NstAborted : public std::runtime_error {
 public:
  NstAborted(const std::string& what, std::vector<LossRecord> trace)
      : std::runtime_error(what), trace(std::move(trace)) {}
  std::vector<LossRecord> trace;
};

/// Minimizes alpha*content + beta*proposed_style over the output pixels by
/// gradient descent with backtracking.
StylizeResult stylize(const Image& content, const ReferenceSet& refs, const Network& net, const NstConfig& cfg);

/// Loss terms of `image` under the same objective stylize() minimizes.
LossRecord evaluate_objective(const Image& image, const Image& content, const ReferenceSet& refs,
                              const Network& net, const NstConfig& cfg);

/// d(total)/d(pixels) at `image`, shape (1,H,W).
Tensor objective_gradient(const Image& image, const Image& content, const ReferenceSet& refs, const Network& net,
                          const NstConfig& cfg);

/// Mean of trace totals over [t, t+window) for each start t.
std::vector<double> windowed_means(const std::vector<LossRecord>& trace, std::size_t window);

void write_trace(const std::vector<LossRecord>& trace, const std::filesystem::path& path);
std::vector<LossRecord> read_trace(const std::filesystem::path& path);

// Batch augmentation ---------------------------------------------------------

enum class CombinationPolicy {
  singles_and_full,  // every single reference plus the full set
  singles,
  full,
};

CombinationPolicy parse_combination_policy(const std::string& s);
std::string to_string(CombinationPolicy p);

/// Reference index subsets produced by `policy` for n references; the full
/// set is not repeated when n == 1.
std::vector<std::vector<std::size_t>> style_combinations(std::size_t n_refs, CombinationPolicy policy);

struct NamedImage {
  std::string id;  // source path or identifier
  Image image;
};

struct AugmentRecord {
  std::string source;
  std::vector<std::string> refs;
  double final_loss = 0.0;
  std::filesystem::path output;
  std::filesystem::path trace;
};

struct AugmentManifest {
  CombinationPolicy policy = CombinationPolicy::singles_and_full;
  std::size_t combinations = 0;
  std::vector<AugmentRecord> records;

  void write(const std::filesystem::path& path) const;
  static AugmentManifest read(const std::filesystem::path& path);
};

struct AugmentOptions {
  CombinationPolicy policy = CombinationPolicy::singles_and_full;
  HistogramMode mode = HistogramMode::match;
  std::size_t bins = 64;
  std::size_t workers = 1;
};

/// Stylizes every content image with every reference combination, writing
/// PGM outputs, per-output trace files and manifest.txt under `out_dir`.
/// The directory is checked for writability before any stylization.
AugmentManifest augment_batch(const std::vector<NamedImage>& contents, const std::vector<NamedImage>& refs,
                              const Network& net, const NstConfig& cfg, const std::filesystem::path& out_dir,
                              const AugmentOptions& opts = {});

/// Throws IoError unless a file can be created inside `dir` (created if missing).
void ensure_writable_dir(const std::filesystem::path& dir);

}  // namespace nstaug
