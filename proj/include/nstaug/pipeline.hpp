#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nstaug/classify.hpp"
#include "nstaug/lrp.hpp"
#include "nstaug/nst.hpp"
#include "nstaug/srad.hpp"

namespace nstaug {

enum class Provenance { original, augmented, denoised };
std::string to_string(Provenance p);

struct DatasetItem {
  std::filesystem::path path;
  Label label = Label::benign;
};

/// Two-class image corpus laid out as <root>/benign and <root>/malignant.
struct Dataset {
  std::filesystem::path root;
  std::vector<DatasetItem> items;
  Provenance provenance = Provenance::original;
  std::vector<std::string> skipped;  // unreadable files left out by ingest

  std::size_t count(Label l) const;
  std::vector<Label> labels() const;
  /// Reads every image; ids are paths relative to the root.
  std::vector<Sample> load() const;
};

/// Lists PGM files of both class directories in lexicographic order.
/// Undecodable files abort the ingest (IoError naming them all) unless
/// `skip_bad` is set, in which case they are recorded in `skipped`.
Dataset ingest(const std::filesystem::path& root, bool skip_bad = false);

/// In-memory corpus of `per_class` images per class, interleaved by class.
std::vector<Sample> synthetic_samples(std::size_t per_class, std::size_t size, std::uint64_t seed);

/// Writes synthetic_samples() as PGM files under `root` and ingests them.
Dataset gen_synthetic(std::size_t per_class, std::size_t size, std::uint64_t seed, const std::filesystem::path& root);

struct GeometricOp {
  enum class Kind { rotate, scale, flip };
  enum class Axis { horizontal, vertical };
  Kind kind = Kind::rotate;
  double value = 0.0;  // degrees counter-clockwise, or zoom factor
  Axis axis = Axis::horizontal;

  static GeometricOp rotate(double degrees);
  static GeometricOp scale(double factor);
  static GeometricOp flip(Axis axis);
  static GeometricOp parse(const std::string& s);  // rotate:<deg> | scale:<s> | flip:h | flip:v
  std::string to_string() const;
};

/// Resamples about the image centre with bilinear interpolation; samples
/// falling outside the input read as 0. Output size equals input size.
Image geometric_augment(const Image& image, const GeometricOp& op);

/// Three rotations, one zoom and one mirror.
std::vector<GeometricOp> default_geometric_ops();

class PipelineError : public std::runtime_error {
 public:
  PipelineError(const std::string& stage, const std::string& what)
      : std::runtime_error("stage " + stage + ": " + what), stage(stage) {}
  std::string stage;
};

struct StageToggles {
  bool denoise = true;
  bool augment = true;
  bool explain = true;
  bool train = true;
  bool evaluate = true;
  bool benchmark = true;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output = "nstaug_run";
  std::filesystem::path input;  // dataset root; empty generates a synthetic corpus
  std::size_t synthetic_per_class = 20;
  std::size_t synthetic_size = 16;
  SplitRatios split;
  StageToggles stages;
  std::size_t workers = 1;

  SradParams srad;

  NstConfig nst;
  std::size_t nst_refs = 2;  // same-class references per class
  AugmentOptions augment;
  bool geometric = false;    // add the geometric baseline variants as well

  LrpConfig lrp;
  std::size_t explain_images = 4;

  TrainConfig train;

  std::vector<std::size_t> benchmark_workers = {1, 2, 4, 8};
  std::size_t benchmark_images = 4;

  PipelineConfig();
  void validate() const;

  /// Flat key=value view; every key is accepted by set().
  std::map<std::string, std::string> to_map() const;
  void set(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();
};

/// Parses "key = value" lines; '#' starts a comment.
PipelineConfig load_config(const std::filesystem::path& path);
void apply_config_text(PipelineConfig& cfg, const std::string& text, const std::string& origin = "config");

struct RunReport {
  std::vector<std::string> stages_run;
  std::vector<std::pair<std::string, std::string>> entries;  // manifest order
  std::optional<MetricsReport> pre, post;
  std::optional<DeltaReport> delta;
  std::optional<ScalingReport> scaling;
  std::filesystem::path manifest;

  void add(const std::string& key, const std::string& value) { entries.emplace_back(key, value); }
};

/// Runs the enabled stages in order and writes <output>/manifest.txt.
/// Keys starting with "timing." hold wall-clock values.
RunReport run_pipeline(const PipelineConfig& cfg);

/// Manifest text without timing lines, for determinism comparisons.
std::string manifest_without_timing(const std::filesystem::path& manifest);

/// FNV-1a over a file's bytes.
std::uint64_t file_checksum(const std::filesystem::path& path);

}  // namespace nstaug
