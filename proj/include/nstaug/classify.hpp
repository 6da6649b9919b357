#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nstaug/dist_train.hpp"
#include "nstaug/featnet.hpp"
#include "nstaug/synthetic.hpp"

namespace nstaug {

struct Sample {
  std::string id;
  Image image;
  Label label = Label::benign;
};

struct SplitRatios {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;

  void validate() const;
};

struct DatasetSplit {
  std::vector<std::size_t> train, val, test;  // indices into the input
};

/// Seeded stratified split: per class, a shuffled order is cut at
/// round(n * train) and round(n * val); the test part takes the rest.
DatasetSplit split_dataset(const std::vector<Label>& labels, const SplitRatios& ratios, std::uint64_t seed);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t patience = 7;
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 3;
  double min_learning_rate = 1e-7;
  std::size_t batch_size = 32;
  double dropout = 0.5;  // 0 disables dropout
  std::uint64_t seed = 0;

  void validate() const;
};

/// Stops once validation loss has not improved for `patience` epochs.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Records one epoch; returns true when training should stop.
  bool observe(double val_loss);
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any epoch
  double best_loss() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0, best_epoch_ = 0, since_best_ = 0;
  double best_ = 0.0;
};

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement, never going below `floor`.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double factor, std::size_t patience, double floor)
      : lr_(lr), factor_(factor), patience_(patience), floor_(floor) {}
  double learning_rate() const { return lr_; }
  void observe(double val_loss);

 private:
  double lr_, factor_;
  std::size_t patience_;
  double floor_;
  std::size_t seen_ = 0, since_best_ = 0;
  double best_ = 0.0;
};

/// Backbone (featnet stack ending in a global average pool) followed by
/// batch normalization, dropout, a 2-unit dense layer and softmax.
class Classifier {
 public:
  explicit Classifier(std::uint64_t seed, LayerKind activation = LayerKind::leaky_relu);

  const Network& backbone() const { return backbone_; }
  std::size_t features() const { return gamma_.size(); }

  std::size_t parameter_count() const;
  std::vector<double> flat_parameters() const;
  void set_flat_parameters(std::span<const double> flat);

  /// Running statistics used at evaluation.
  const std::vector<double>& running_mean() const { return running_mean_; }
  const std::vector<double>& running_var() const { return running_var_; }
  void set_running_stats(std::vector<double> mean, std::vector<double> var);

  /// Mean cross-entropy over `batch`. With `batch_stats` the normalization
  /// uses the batch's own mean and variance; otherwise the running ones.
  /// Dropout masks derive from `noise_seed` and each sample's index; a
  /// dropout rate of 0 disables them. Writes the gradient when non-empty.
  struct BatchResult {
    double loss = 0.0;
    std::size_t correct = 0;
    std::vector<double> batch_mean, batch_var;
  };
  BatchResult loss_and_gradient(std::span<const double> params, const std::vector<Sample>& data,
                                std::span<const std::size_t> batch, bool batch_stats, double dropout,
                                std::uint64_t noise_seed, std::span<double> grad) const;

  /// Class probabilities at evaluation (running statistics, no dropout).
  std::array<double, 2> predict(const Image& image) const;
  Label classify(const Image& image) const;

  /// Equivalent plain network with the normalization folded into the dense
  /// layer: backbone, "logits", "prob".
  Network to_network() const;

 private:
  Network backbone_;
  std::vector<double> gamma_, beta_, running_mean_, running_var_;
  Tensor dense_w_;  // (2, C)
  std::vector<double> dense_b_;
};

inline constexpr double kBatchNormEps = 1e-5;

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double learning_rate = 0.0;
  double train_loss = 0.0, train_accuracy = 0.0;
  double val_loss = 0.0, val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  bool stopped_early = false;
  std::size_t best_epoch = 0;

  std::string to_text() const;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::size_t epoch) : std::runtime_error(what), epoch(epoch) {}
  std::size_t epoch;
};

struct TrainResult {
  Classifier model;
  TrainHistory history;
};

/// Mini-batch SGD with momentum on all layers, early stopping on validation
/// loss and a plateau schedule. Returns the weights of the best epoch; the
/// running statistics are the mean of that epoch's batch statistics.
/// An empty validation set scores epochs by training loss.
TrainResult train_head(const std::vector<Sample>& train, const std::vector<Sample>& val, const TrainConfig& cfg);

/// dist-train adapter: batch indices refer to `data`. Normalization uses
/// the model's running statistics so the loss is a per-sample mean.
class ClassifierObjective : public Objective {
 public:
  ClassifierObjective(const Classifier& model, const std::vector<Sample>& data, double dropout)
      : model_(model), data_(data), dropout_(dropout) {}
  std::size_t parameter_count() const override { return model_.parameter_count(); }
  double loss_and_gradient(std::span<const double> params, std::span<const std::size_t> batch,
                           std::uint64_t noise_seed, std::span<double> grad) const override;

 private:
  const Classifier& model_;
  const std::vector<Sample>& data_;
  double dropout_;
};

struct ConfusionMatrix {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;  // malignant is positive
  std::size_t total() const { return tp + fp + tn + fn; }
};

struct MetricsReport {
  ConfusionMatrix matrix;
  std::optional<double> accuracy, recall, specificity, precision, f1;

  static MetricsReport from_matrix(const ConfusionMatrix& m);
  static MetricsReport from_predictions(const std::vector<Label>& truth, const std::vector<Label>& predicted);

  /// 2x2 block (rows: true benign/malignant, columns: predicted) followed by
  /// one "name value" line per metric; undefined metrics print "undefined".
  std::string to_text() const;
  static MetricsReport parse(const std::string& text);
};

MetricsReport evaluate(const Network& net, const std::vector<Sample>& test);
MetricsReport evaluate(const Classifier& model, const std::vector<Sample>& test);

struct MetricDelta {
  std::string name;
  std::optional<double> pre, post, delta;
};

struct DeltaReport {
  std::vector<MetricDelta> metrics;
  std::string to_text() const;
};

/// Reference accuracies reported for the original corpus; not reproduced.
inline constexpr double kReferencePreAccuracy = 0.5521;
inline constexpr double kReferencePostAccuracy = 0.9247;

DeltaReport compare_pre_post(const MetricsReport& pre, const MetricsReport& post);

}  // namespace nstaug
