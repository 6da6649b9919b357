#include "nstaug/classify.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "nstaug/rng.hpp"

namespace nstaug {

void SplitRatios::validate() const {
  for (double r : {train, val, test}) {
    if (!(r >= 0.0 && r <= 1.0)) throw ShapeError("split ratios must lie in [0,1]");
  }
  if (std::abs(train + val + test - 1.0) > 1e-9) throw ShapeError("split ratios must sum to 1");
}

DatasetSplit split_dataset(const std::vector<Label>& labels, const SplitRatios& ratios, std::uint64_t seed) {
  ratios.validate();
  const double r[3] = {ratios.train, ratios.val, ratios.test};
  std::size_t parts = 0;
  for (double x : r) parts += x > 0.0 ? 1 : 0;

  DatasetSplit out;
  std::vector<std::size_t>* dest[3] = {&out.train, &out.val, &out.test};
  for (Label cls : {Label::benign, Label::malignant}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) idx.push_back(i);
    }
    const std::size_t n = idx.size();
    if (n == 0) continue;
    if (n < parts) {
      throw ShapeError("split: class " + std::string(label_name(cls)) + " has " + std::to_string(n) +
                       " items, fewer than the " + std::to_string(parts) + " partitions");
    }
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(cls));
    rng.shuffle(idx.begin(), idx.end());

    std::size_t count[3];
    count[0] = static_cast<std::size_t>(std::llround(static_cast<double>(n) * r[0]));
    count[1] = std::min(n - count[0], static_cast<std::size_t>(std::llround(static_cast<double>(n) * r[1])));
    count[2] = n - count[0] - count[1];
    if (r[2] == 0.0 && count[2] > 0) {
      (r[1] > 0.0 ? count[1] : count[0]) += count[2];
      count[2] = 0;
    }
    // every used partition receives at least one item of each class
    for (int p = 0; p < 3; ++p) {
      if (r[p] > 0.0 && count[p] == 0) {
        int donor = static_cast<int>(std::max_element(count, count + 3) - count);
        --count[donor];
        ++count[p];
      }
    }
    std::size_t pos = 0;
    for (int p = 0; p < 3; ++p) {
      for (std::size_t k = 0; k < count[p]; ++k) dest[p]->push_back(idx[pos++]);
    }
  }
  for (auto* d : dest) std::sort(d->begin(), d->end());
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ShapeError("train: epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ShapeError("train: learning rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ShapeError("train: momentum must lie in [0,1)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ShapeError("train: dropout must lie in [0,1)");
  if (patience < 1 || patience > epochs) throw ShapeError("train: patience must lie in [1, epochs]");
  if (!(plateau_factor > 0.0 && plateau_factor <= 1.0)) throw ShapeError("train: plateau factor must lie in (0,1]");
  if (plateau_patience < 1) throw ShapeError("train: plateau patience must be >= 1");
  if (!(min_learning_rate >= 0.0)) throw ShapeError("train: learning-rate floor must be >= 0");
  if (batch_size < 1) throw ShapeError("train: batch size must be >= 1");
}

bool EarlyStopping::observe(double val_loss) {
  ++epoch_;
  if (best_epoch_ == 0 || val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    since_best_ = 0;
    return false;
  }
  return ++since_best_ >= patience_;
}

void PlateauSchedule::observe(double val_loss) {
  if (seen_++ == 0 || val_loss < best_) {
    best_ = val_loss;
    since_best_ = 0;
    return;
  }
  if (++since_best_ >= patience_) {
    lr_ = std::max(floor_, lr_ * factor_);
    since_best_ = 0;
  }
}

namespace {

std::vector<LayerSpec> backbone_layers(LayerKind activation) {
  auto layers = default_feature_layers(activation, 0.01);
  layers.push_back(LayerSpec::global_pool("gap"));
  return layers;
}

double xent(const double z[2], std::size_t label, double p[2]) {
  const double m = std::max(z[0], z[1]);
  const double lse = m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m));
  p[0] = std::exp(z[0] - lse);
  p[1] = std::exp(z[1] - lse);
  return lse - z[label];
}

}  // namespace

Classifier::Classifier(std::uint64_t seed, LayerKind activation)
    : backbone_(build_network(backbone_layers(activation), seed)) {
  std::size_t c = 0;
  for (const auto& l : backbone_.layers()) {
    if (l.kind == LayerKind::conv) c = l.out_channels;
  }
  gamma_.assign(c, 1.0);
  beta_.assign(c, 0.0);
  running_mean_.assign(c, 0.0);
  running_var_.assign(c, 1.0);
  dense_w_ = Tensor({2, c});
  Rng rng = Rng::derive(seed, 0xD5);
  const double scale = std::sqrt(1.0 / static_cast<double>(c));
  for (double& v : dense_w_.values()) v = scale * rng.normal();
  dense_b_.assign(2, 0.0);
}

std::size_t Classifier::parameter_count() const {
  return backbone_.parameter_count() + 2 * gamma_.size() + dense_w_.size() + dense_b_.size();
}

std::vector<double> Classifier::flat_parameters() const {
  std::vector<double> flat = backbone_.flat_parameters();
  flat.insert(flat.end(), gamma_.begin(), gamma_.end());
  flat.insert(flat.end(), beta_.begin(), beta_.end());
  flat.insert(flat.end(), dense_w_.values().begin(), dense_w_.values().end());
  flat.insert(flat.end(), dense_b_.begin(), dense_b_.end());
  return flat;
}

void Classifier::set_flat_parameters(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw ShapeError("classifier: parameter vector has the wrong length");
  const std::size_t nb = backbone_.parameter_count(), c = gamma_.size();
  backbone_.set_flat_parameters(flat.subspan(0, nb));
  auto it = flat.begin() + static_cast<std::ptrdiff_t>(nb);
  std::copy_n(it, c, gamma_.begin());
  std::copy_n(it + static_cast<std::ptrdiff_t>(c), c, beta_.begin());
  std::copy_n(it + static_cast<std::ptrdiff_t>(2 * c), dense_w_.size(), dense_w_.values().begin());
  std::copy_n(it + static_cast<std::ptrdiff_t>(2 * c + dense_w_.size()), 2, dense_b_.begin());
}

void Classifier::set_running_stats(std::vector<double> mean, std::vector<double> var) {
  if (mean.size() != gamma_.size() || var.size() != gamma_.size()) {
    throw ShapeError("classifier: running statistics have the wrong length");
  }
  running_mean_ = std::move(mean);
  running_var_ = std::move(var);
}

Classifier::BatchResult Classifier::loss_and_gradient(std::span<const double> params, const std::vector<Sample>& data,
                                                      std::span<const std::size_t> batch, bool batch_stats,
                                                      double dropout, std::uint64_t noise_seed,
                                                      std::span<double> grad) const {
  if (batch.empty()) throw ShapeError("classifier: empty batch");
  Classifier m = *this;
  m.set_flat_parameters(params);
  const std::size_t nb = batch.size(), c = gamma_.size();
  const LayerId gap = backbone_.layer_count() - 1;

  std::vector<Activations> acts;
  acts.reserve(nb);
  std::vector<double> x(nb * c);
  for (std::size_t b = 0; b < nb; ++b) {
    const Sample& s = data.at(batch[b]);
    acts.push_back(m.backbone_.forward(s.image.to_tensor()));
    const Tensor& f = acts.back().outputs[gap];
    if (f.size() != c) throw ShapeError("classifier: backbone feature size mismatch");
    std::copy(f.values().begin(), f.values().end(), x.begin() + static_cast<std::ptrdiff_t>(b * c));
  }

  BatchResult res;
  std::vector<double> mu = m.running_mean_, var = m.running_var_;
  if (batch_stats) {
    mu.assign(c, 0.0);
    var.assign(c, 0.0);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t k = 0; k < c; ++k) mu[k] += x[b * c + k];
    for (double& v : mu) v /= static_cast<double>(nb);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t k = 0; k < c; ++k) var[k] += std::pow(x[b * c + k] - mu[k], 2);
    for (double& v : var) v /= static_cast<double>(nb);
  }
  std::vector<double> inv_sd(c);
  for (std::size_t k = 0; k < c; ++k) inv_sd[k] = 1.0 / std::sqrt(var[k] + kBatchNormEps);

  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != parameter_count()) throw ShapeError("classifier: gradient has the wrong length");
  std::vector<double> xhat(nb * c), mask(nb * c, 1.0), dxhat(nb * c, 0.0);
  std::vector<double> dgamma(c, 0.0), dbeta(c, 0.0), dw(2 * c, 0.0), db(2, 0.0);
  const double keep_scale = dropout > 0.0 ? 1.0 / (1.0 - dropout) : 1.0;
  const double inv_n = 1.0 / static_cast<double>(nb);

  for (std::size_t b = 0; b < nb; ++b) {
    if (dropout > 0.0) {
      Rng rng = Rng::derive(noise_seed, batch[b]);
      for (std::size_t k = 0; k < c; ++k) mask[b * c + k] = rng.uniform() < dropout ? 0.0 : keep_scale;
    }
    std::vector<double> h(c);
    for (std::size_t k = 0; k < c; ++k) {
      xhat[b * c + k] = (x[b * c + k] - mu[k]) * inv_sd[k];
      h[k] = (m.gamma_[k] * xhat[b * c + k] + m.beta_[k]) * mask[b * c + k];
    }
    double z[2], p[2];
    for (std::size_t o = 0; o < 2; ++o) {
      z[o] = m.dense_b_[o];
      for (std::size_t k = 0; k < c; ++k) z[o] += m.dense_w_[o * c + k] * h[k];
    }
    const auto label = static_cast<std::size_t>(data[batch[b]].label);
    res.loss += xent(z, label, p) * inv_n;
    if ((p[1] > p[0] ? 1u : 0u) == label) ++res.correct;
    if (!want_grad) continue;
    const double dz[2] = {(p[0] - (label == 0 ? 1.0 : 0.0)) * inv_n, (p[1] - (label == 1 ? 1.0 : 0.0)) * inv_n};
    for (std::size_t o = 0; o < 2; ++o) {
      db[o] += dz[o];
      for (std::size_t k = 0; k < c; ++k) dw[o * c + k] += dz[o] * h[k];
    }
    for (std::size_t k = 0; k < c; ++k) {
      const double dy = (m.dense_w_[k] * dz[0] + m.dense_w_[c + k] * dz[1]) * mask[b * c + k];
      dgamma[k] += dy * xhat[b * c + k];
      dbeta[k] += dy;
      dxhat[b * c + k] = dy * m.gamma_[k];
    }
  }
  res.batch_mean = mu;
  res.batch_var = var;
  if (!want_grad) return res;

  std::fill(grad.begin(), grad.end(), 0.0);
  std::vector<double> dx(nb * c);
  if (batch_stats) {
    std::vector<double> sum_d(c, 0.0), sum_dx(c, 0.0);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t k = 0; k < c; ++k) {
        sum_d[k] += dxhat[b * c + k];
        sum_dx[k] += dxhat[b * c + k] * xhat[b * c + k];
      }
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t k = 0; k < c; ++k)
        dx[b * c + k] = inv_sd[k] * (dxhat[b * c + k] - inv_n * sum_d[k] - inv_n * xhat[b * c + k] * sum_dx[k]);
  } else {
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t k = 0; k < c; ++k) dx[b * c + k] = inv_sd[k] * dxhat[b * c + k];
  }
  const std::size_t np = backbone_.parameter_count();
  for (std::size_t b = 0; b < nb; ++b) {
    Tensor up({c}, std::vector<double>(dx.begin() + static_cast<std::ptrdiff_t>(b * c),
                                       dx.begin() + static_cast<std::ptrdiff_t>((b + 1) * c)));
    const Gradients g = m.backbone_.backward(acts[b], {{gap, std::move(up)}}, true);
    for (std::size_t i = 0; i < np; ++i) grad[i] += g.params[i];
  }
  std::copy(dgamma.begin(), dgamma.end(), grad.begin() + static_cast<std::ptrdiff_t>(np));
  std::copy(dbeta.begin(), dbeta.end(), grad.begin() + static_cast<std::ptrdiff_t>(np + c));
  std::copy(dw.begin(), dw.end(), grad.begin() + static_cast<std::ptrdiff_t>(np + 2 * c));
  std::copy(db.begin(), db.end(), grad.begin() + static_cast<std::ptrdiff_t>(np + 4 * c));
  return res;
}

std::array<double, 2> Classifier::predict(const Image& image) const {
  const Tensor f = backbone_.forward(image.to_tensor()).outputs.back();
  const std::size_t c = gamma_.size();
  double z[2], p[2];
  for (std::size_t o = 0; o < 2; ++o) {
    z[o] = dense_b_[o];
    for (std::size_t k = 0; k < c; ++k) {
      const double y = gamma_[k] * (f[k] - running_mean_[k]) / std::sqrt(running_var_[k] + kBatchNormEps) + beta_[k];
      z[o] += dense_w_[o * c + k] * y;
    }
  }
  xent(z, 0, p);
  return {p[0], p[1]};
}

Label Classifier::classify(const Image& image) const {
  const auto p = predict(image);
  return p[1] > p[0] ? Label::malignant : Label::benign;
}

Network Classifier::to_network() const {
  auto layers = backbone_.layers();
  layers.push_back(LayerSpec::dense(2, "logits"));
  layers.push_back(LayerSpec::softmax("prob"));
  Network net = build_network(layers, 0, backbone_.input_channels());
  for (std::size_t i = 0; i < backbone_.layer_count(); ++i) net.params()[i] = backbone_.params()[i];
  const std::size_t c = gamma_.size();
  LayerParams& d = net.params()[backbone_.layer_count()];
  for (std::size_t o = 0; o < 2; ++o) {
    double bias = dense_b_[o];
    for (std::size_t k = 0; k < c; ++k) {
      const double s = gamma_[k] / std::sqrt(running_var_[k] + kBatchNormEps);
      d.weight[o * c + k] = dense_w_[o * c + k] * s;
      bias += dense_w_[o * c + k] * (beta_[k] - s * running_mean_[k]);
    }
    d.bias[o] = bias;
  }
  return net;
}

std::string TrainHistory::to_text() const {
  std::ostringstream o;
  o << std::setprecision(17);
  o << "# epoch learning_rate train_loss train_accuracy val_loss val_accuracy\n";
  for (const auto& e : epochs) {
    o << e.epoch << ' ' << e.learning_rate << ' ' << e.train_loss << ' ' << e.train_accuracy << ' ' << e.val_loss
      << ' ' << e.val_accuracy << '\n';
  }
  o << "# best_epoch " << best_epoch << " stopped_early " << (stopped_early ? 1 : 0) << '\n';
  return o.str();
}

namespace {

struct EvalLoss {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalLoss eval_loss(const Classifier& m, const std::vector<double>& params, const std::vector<Sample>& data) {
  EvalLoss e;
  std::size_t correct = 0;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const auto r = m.loss_and_gradient(params, data, idx, false, 0.0, 0, {});
    e.loss += r.loss * static_cast<double>(idx.size());
    correct += r.correct;
  }
  e.loss /= static_cast<double>(data.size());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return e;
}

}  // namespace

TrainResult train_head(const std::vector<Sample>& train, const std::vector<Sample>& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ShapeError("train: empty training set");
  Classifier model(cfg.seed);
  std::vector<double> params = model.flat_parameters();
  std::vector<double> velocity(params.size(), 0.0), grad(params.size());

  TrainResult best{model, {}};
  EarlyStopping stopper(cfg.patience);
  PlateauSchedule plateau(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience, cfg.min_learning_rate);
  std::vector<std::size_t> order(train.size());
  const std::size_t c = model.features();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = Rng::derive(cfg.seed, epoch);
    rng.shuffle(order.begin(), order.end());

    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = plateau.learning_rate();
    std::vector<double> mean_acc(c, 0.0), var_acc(c, 0.0);
    std::size_t batches = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      const std::uint64_t noise = Rng::derive(cfg.seed ^ 0xA5A5ULL, epoch * 100003 + batches).next_u64();
      const auto r = model.loss_and_gradient(params, train, batch, true, cfg.dropout, noise, grad);
      if (!std::isfinite(r.loss)) {
        throw TrainingAborted("train: non-finite loss in epoch " + std::to_string(epoch), epoch);
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] - rec.learning_rate * grad[i];
        params[i] += velocity[i];
      }
      for (std::size_t k = 0; k < c; ++k) {
        mean_acc[k] += r.batch_mean[k];
        var_acc[k] += r.batch_var[k];
      }
      rec.train_loss += r.loss * static_cast<double>(batch.size());
      correct += r.correct;
      ++batches;
    }
    rec.train_loss /= static_cast<double>(train.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    for (std::size_t k = 0; k < c; ++k) {
      mean_acc[k] /= static_cast<double>(batches);
      var_acc[k] /= static_cast<double>(batches);
    }
    model.set_flat_parameters(params);
    model.set_running_stats(mean_acc, var_acc);

    if (val.empty()) {
      rec.val_loss = rec.train_loss;
      rec.val_accuracy = rec.train_accuracy;
    } else {
      const EvalLoss e = eval_loss(model, params, val);
      rec.val_loss = e.loss;
      rec.val_accuracy = e.accuracy;
    }
    if (!std::isfinite(rec.val_loss)) {
      throw TrainingAborted("train: non-finite validation loss in epoch " + std::to_string(epoch), epoch);
    }
    best.history.epochs.push_back(rec);
    const bool stop = stopper.observe(rec.val_loss);
    plateau.observe(rec.val_loss);
    if (stopper.best_epoch() == epoch) best.model = model;
    if (stop) {
      best.history.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  best.history.best_epoch = stopper.best_epoch();
  return best;
}

double ClassifierObjective::loss_and_gradient(std::span<const double> params, std::span<const std::size_t> batch,
                                              std::uint64_t noise_seed, std::span<double> grad) const {
  return model_.loss_and_gradient(params, data_, batch, false, dropout_, noise_seed, grad).loss;
}

MetricsReport MetricsReport::from_matrix(const ConfusionMatrix& m) {
  MetricsReport r;
  r.matrix = m;
  auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = ratio(m.tp + m.tn, m.total());
  r.recall = ratio(m.tp, m.tp + m.fn);
  r.specificity = ratio(m.tn, m.tn + m.fp);
  r.precision = ratio(m.tp, m.tp + m.fp);
  if (r.precision && r.recall) {
    const double s = *r.precision + *r.recall;
    r.f1 = s > 0.0 ? 2.0 * *r.precision * *r.recall / s : 0.0;
  }
  return r;
}

MetricsReport MetricsReport::from_predictions(const std::vector<Label>& truth, const std::vector<Label>& predicted) {
  if (truth.size() != predicted.size()) throw ShapeError("metrics: label and prediction counts differ");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool t = truth[i] == Label::malignant, p = predicted[i] == Label::malignant;
    (t ? (p ? m.tp : m.fn) : (p ? m.fp : m.tn))++;
  }
  return from_matrix(m);
}

namespace {

const char* const kMetricNames[] = {"accuracy", "recall", "specificity", "precision", "f1"};

std::optional<double> MetricsReport::*const kMetricFields[] = {&MetricsReport::accuracy, &MetricsReport::recall,
                                                               &MetricsReport::specificity, &MetricsReport::precision,
                                                               &MetricsReport::f1};

std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void put(std::ostream& o, const std::optional<double>& v) { o << (v ? shortest(*v) : std::string("undefined")); }

}  // namespace

std::string MetricsReport::to_text() const {
  std::ostringstream o;
  o << std::setprecision(17);
  o << "# confusion: rows true benign/malignant, columns predicted benign/malignant\n";
  o << "benign " << matrix.tn << ' ' << matrix.fp << '\n';
  o << "malignant " << matrix.fn << ' ' << matrix.tp << '\n';
  for (std::size_t i = 0; i < 5; ++i) {
    o << kMetricNames[i] << ' ';
    put(o, this->*kMetricFields[i]);
    o << '\n';
  }
  return o.str();
}

MetricsReport MetricsReport::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  ConfusionMatrix m;
  bool have_b = false, have_m = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "benign") {
      have_b = static_cast<bool>(ls >> m.tn >> m.fp);
    } else if (key == "malignant") {
      have_m = static_cast<bool>(ls >> m.fn >> m.tp);
    }
  }
  if (!have_b || !have_m) throw IoError("metrics report: missing confusion rows");
  return from_matrix(m);
}

MetricsReport evaluate(const Network& net, const std::vector<Sample>& test) {
  if (test.empty()) throw ShapeError("evaluate: empty test set");
  std::vector<Label> truth, pred;
  for (const Sample& s : test) {
    const Tensor out = net.forward(s.image.to_tensor()).outputs.back();
    if (out.size() != 2) throw ShapeError("evaluate: network must end in 2 class scores");
    truth.push_back(s.label);
    pred.push_back(out[1] > out[0] ? Label::malignant : Label::benign);
  }
  return MetricsReport::from_predictions(truth, pred);
}

MetricsReport evaluate(const Classifier& model, const std::vector<Sample>& test) {
  if (test.empty()) throw ShapeError("evaluate: empty test set");
  std::vector<Label> truth, pred;
  for (const Sample& s : test) {
    truth.push_back(s.label);
    pred.push_back(model.classify(s.image));
  }
  return MetricsReport::from_predictions(truth, pred);
}

std::string DeltaReport::to_text() const {
  std::ostringstream o;
  o << std::setprecision(17);
  o << "# metric pre post delta\n";
  for (const auto& m : metrics) {
    o << m.name << ' ';
    put(o, m.pre);
    o << ' ';
    put(o, m.post);
    o << ' ';
    put(o, m.delta);
    o << '\n';
  }
  o << "# reference accuracy on the original corpus (unverified, not reproduced): pre 0.5521 post 0.9247 delta "
       "+0.3726\n";
  return o.str();
}

DeltaReport compare_pre_post(const MetricsReport& pre, const MetricsReport& post) {
  DeltaReport d;
  for (std::size_t i = 0; i < 5; ++i) {
    MetricDelta m{kMetricNames[i], pre.*kMetricFields[i], post.*kMetricFields[i], std::nullopt};
    if (m.pre && m.post) m.delta = *m.post - *m.pre;
    d.metrics.push_back(m);
  }
  return d;
}

}  // namespace nstaug
