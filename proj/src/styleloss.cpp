#include "nstaug/styleloss.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "nstaug/rng.hpp"

namespace nstaug {

namespace {

// Views a (N, ...) activation as an N x M matrix.
struct MapView {
  const double* data;
  std::size_t n;
  std::size_t m;

  double operator()(std::size_t i, std::size_t k) const { return data[i * m + k]; }
};

MapView view(const Tensor& f, const char* who) {
  if (f.rank() == 0 || f.empty() || f.dim(0) == 0) throw ShapeError(std::string(who) + ": empty feature map");
  return {f.data().data(), f.dim(0), f.size() / f.dim(0)};
}

// Column-restricted copy of a feature map (N x picked.size()).
Tensor select_columns(const Tensor& f, const std::vector<std::size_t>& picked) {
  const MapView v = view(f, "select_columns");
  Tensor out({v.n, picked.size()});
  for (std::size_t i = 0; i < v.n; ++i)
    for (std::size_t k = 0; k < picked.size(); ++k) out[i * picked.size() + k] = v(i, picked[k]);
  return out;
}

double sq(double x) { return x * x; }

// sum_{k1,k2} (a_k1 . b_k2)^2 over columns of two N-row maps.
double poly2_kernel_sum(const MapView& a, const MapView& b) {
  double total = 0.0;
  for (std::size_t k1 = 0; k1 < a.m; ++k1) {
    for (std::size_t k2 = 0; k2 < b.m; ++k2) {
      double dot = 0.0;
      for (std::size_t i = 0; i < a.n; ++i) dot += a(i, k1) * b(i, k2);
      total += dot * dot;
    }
  }
  return total;
}

}  // namespace

bool is_symmetric(const GramMatrix& g, double tol) {
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = i + 1; j < g.n; ++j)
      if (std::abs(g(i, j) - g(j, i)) > tol) return false;
  return true;
}

double min_eigenvalue(const GramMatrix& g) {
  if (g.n == 0) throw ShapeError("min_eigenvalue: empty matrix");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(g.n), static_cast<Eigen::Index>(g.n));
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.n; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().minCoeff();
}

void LossWeights::validate() const {
  auto ok = [](double w) { return std::isfinite(w) && w >= 0.0; };
  if (!ok(alpha) || !ok(beta) || !ok(gamma_beta_prime)) {
    throw ShapeError("loss weights must be finite and nonnegative");
  }
  bool any = false;
  for (const auto& [id, w] : layer_weights) {
    if (!ok(w)) throw ShapeError("layer weight for layer " + std::to_string(id) + " must be finite and >= 0");
    any |= w > 0.0;
  }
  if (!any) throw ShapeError("at least one style layer weight must be positive");
}

LossWeights LossWeights::uniform(const std::vector<LayerId>& layers, double w) {
  LossWeights lw;
  for (LayerId id : layers) lw.layer_weights[id] = w;
  return lw;
}

void DensityHistogram::validate() const {
  if (masses.empty() || edges.size() != masses.size() + 1) {
    throw ShapeError("histogram needs bins+1 edges, got " + std::to_string(edges.size()) + " edges for " +
                     std::to_string(masses.size()) + " bins");
  }
  double total = 0.0;
  for (double p : masses) {
    if (!(p >= 0.0)) throw ShapeError("histogram masses must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ShapeError("histogram masses sum to " + std::to_string(total));
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
    if (!(edges[b] < edges[b + 1])) throw ShapeError("histogram edges must increase");
  }
}

double DensityHistogram::quantile(double u) const {
  u = std::clamp(u, 0.0, 1.0);
  double cum = 0.0;
  for (std::size_t b = 0; b < masses.size(); ++b) {
    if (masses[b] <= 0.0) continue;
    if (u <= cum + masses[b] || b + 1 == masses.size()) {
      const double t = std::clamp((u - cum) / masses[b], 0.0, 1.0);
      return edges[b] + t * (edges[b + 1] - edges[b]);
    }
    cum += masses[b];
  }
  // All remaining mass exhausted: top edge of the last populated bin.
  for (std::size_t b = masses.size(); b-- > 0;) {
    if (masses[b] > 0.0) return edges[b + 1];
  }
  return edges.back();
}

void ReferenceSet::validate() const {
  if (images.empty()) throw ShapeError("reference set is empty");
  for (const Image& img : images) img.validate();
  if (target) target->validate();
  if (bins == 0) throw ShapeError("reference histogram needs at least one bin");
}

double content_loss(const Tensor& f_hat, const Tensor& f_c) {
  if (f_hat.shape() != f_c.shape()) {
    throw ShapeError("content_loss: shape mismatch " + shape_str(f_hat.shape()) + " vs " + shape_str(f_c.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < f_hat.size(); ++i) s += sq(f_hat[i] - f_c[i]);
  return 0.5 * s;
}

double content_loss(const FeatureStack& f_hat, const FeatureStack& f_c, LayerId layer) {
  return content_loss(f_hat.at(layer), f_c.at(layer));
}

GramMatrix gram(const Tensor& feature_map, LayerId layer) {
  const MapView f = view(feature_map, "gram");
  GramMatrix g;
  g.n = f.n;
  g.layer = layer;
  g.entries.assign(f.n * f.n, 0.0);
  for (std::size_t i = 0; i < f.n; ++i) {
    for (std::size_t j = i; j < f.n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < f.m; ++k) acc += f(i, k) * f(j, k);
      g(i, j) = acc;
      g(j, i) = acc;
    }
  }
  return g;
}

double style_layer_loss(const GramMatrix& g_hat, const GramMatrix& g_ref, std::size_t n_l, std::size_t m_l) {
  if (g_hat.n != g_ref.n || g_hat.entries.size() != g_ref.entries.size()) {
    throw ShapeError("style_layer_loss: Gram sizes " + std::to_string(g_hat.n) + " and " + std::to_string(g_ref.n) +
                     " differ");
  }
  if (n_l == 0 || m_l == 0) throw ShapeError("style_layer_loss: N_l and M_l must be positive");
  double s = 0.0;
  for (std::size_t i = 0; i < g_hat.entries.size(); ++i) s += sq(g_hat.entries[i] - g_ref.entries[i]);
  const double nm = static_cast<double>(n_l) * static_cast<double>(m_l);
  return s / (4.0 * nm * nm);
}

double style_loss(const FeatureStack& f_hat, const FeatureStack& f_s, const LossWeights& weights) {
  weights.validate();
  double total = 0.0;
  for (const auto& [id, w] : weights.layer_weights) {
    const Tensor& a = f_hat.at(id);
    const Tensor& b = f_s.at(id);
    if (a.shape() != b.shape()) {
      throw ShapeError("style_loss: layer " + std::to_string(id) + " shapes " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
    total += w * style_layer_loss(gram(a, id), gram(b, id), f_hat.channels(id), f_hat.spatial(id));
  }
  return total;
}

double mmd_poly2_style_loss(const Tensor& f_hat, const Tensor& f_s, const MmdOptions& opts) {
  MapView a = view(f_hat, "mmd_poly2_style_loss");
  MapView b = view(f_s, "mmd_poly2_style_loss");
  if (a.n != b.n) {
    throw ShapeError("mmd_poly2_style_loss: channel counts " + std::to_string(a.n) + " and " + std::to_string(b.n) +
                     " differ");
  }
  Tensor sub_a, sub_b;
  if (a.m != b.m) {
    if (opts.mismatch == SpatialMismatch::reject) {
      throw ShapeError("mmd_poly2_style_loss: spatial sizes " + std::to_string(a.m) + " and " + std::to_string(b.m) +
                       " differ (enable subsampling to allow)");
    }
    Rng rng(opts.seed);
    const std::size_t m = std::min(a.m, b.m);
    auto pick = [&](std::size_t total) {
      std::vector<std::size_t> idx(total);
      std::iota(idx.begin(), idx.end(), 0);
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(m);
      std::sort(idx.begin(), idx.end());
      return idx;
    };
    if (a.m > m) {
      sub_a = select_columns(f_hat, pick(a.m));
      a = view(sub_a, "mmd_poly2_style_loss");
    }
    if (b.m > m) {
      sub_b = select_columns(f_s, pick(b.m));
      b = view(sub_b, "mmd_poly2_style_loss");
    }
  }
  const double m = static_cast<double>(a.m);
  const double n = static_cast<double>(a.n);
  const double mmd2 = (poly2_kernel_sum(a, a) + poly2_kernel_sum(b, b) - 2.0 * poly2_kernel_sum(a, b)) / (m * m);
  return mmd2 / (4.0 * n * n);
}

ExpansionReport kernel_expansion_check(const Tensor& f_hat, const Tensor& f_s) {
  if (f_hat.shape() != f_s.shape()) {
    throw ShapeError("kernel_expansion_check: shapes " + shape_str(f_hat.shape()) + " vs " + shape_str(f_s.shape()));
  }
  const MapView a = view(f_hat, "kernel_expansion_check");
  const MapView b = view(f_s, "kernel_expansion_check");
  ExpansionReport r;
  r.gram_form = style_layer_loss(gram(f_hat), gram(f_s), a.n, a.m);

  const double nm = static_cast<double>(a.n) * static_cast<double>(a.m);
  double acc = 0.0;
  for (std::size_t k1 = 0; k1 < a.m; ++k1) {
    for (std::size_t k2 = 0; k2 < a.m; ++k2) {
      double ff = 0.0, ss = 0.0, fs = 0.0;
      for (std::size_t i = 0; i < a.n; ++i) {
        ff += a(i, k1) * a(i, k2);
        ss += b(i, k1) * b(i, k2);
        fs += a(i, k1) * b(i, k2);
      }
      acc += ff * ff + ss * ss - 2.0 * fs * fs;
    }
  }
  r.kernel_form = acc / (4.0 * nm * nm);
  const double scale = std::max(std::abs(r.gram_form), std::abs(r.kernel_form));
  r.relative_gap = scale == 0.0 ? 0.0 : std::abs(r.gram_form - r.kernel_form) / scale;
  return r;
}

GramMatrix elementwise_max(const std::vector<GramMatrix>& grams) {
  if (grams.empty()) throw ShapeError("elementwise_max: no Gram matrices");
  GramMatrix out = grams.front();
  for (std::size_t r = 1; r < grams.size(); ++r) {
    if (grams[r].n != out.n) {
      throw ShapeError("elementwise_max: Gram sizes " + std::to_string(out.n) + " and " + std::to_string(grams[r].n) +
                       " differ");
    }
    for (std::size_t i = 0; i < out.entries.size(); ++i) out.entries[i] = std::max(out.entries[i], grams[r].entries[i]);
  }
  return out;
}

namespace {

std::vector<double> upper_triangle(const GramMatrix& g) {
  std::vector<double> v;
  v.reserve(g.n * (g.n + 1) / 2);
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = i; j < g.n; ++j) v.push_back(g(i, j));
  return v;
}

}  // namespace

DensityHistogram average_entry_histogram(const std::vector<GramMatrix>& grams, std::size_t bins) {
  if (grams.empty()) throw ShapeError("average_entry_histogram: no Gram matrices");
  if (bins == 0) throw ShapeError("average_entry_histogram: zero bins");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& g : grams) {
    for (double v : upper_triangle(g)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!(hi > lo)) {
    const double pad = std::max(1e-12, std::abs(lo) * 1e-9);
    lo -= pad;
    hi += pad;
  }
  DensityHistogram h;
  h.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) h.edges[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
  h.edges.back() = hi;
  h.masses.assign(bins, 0.0);
  const double per_ref = 1.0 / static_cast<double>(grams.size());
  for (const auto& g : grams) {
    const auto entries = upper_triangle(g);
    const double w = per_ref / static_cast<double>(entries.size());
    for (double v : entries) {
      auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
      h.masses[std::min(b, bins - 1)] += w;
    }
  }
  return h;
}

GramMatrix histogram_specify(const GramMatrix& g, const DensityHistogram& target) {
  target.validate();
  const auto entries = upper_triangle(g);
  const std::size_t count = entries.size();
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return entries[a] < entries[b]; });

  // Mid-rank empirical CDF; ties share their average rank so equal entries stay equal.
  std::vector<double> mapped(count);
  for (std::size_t start = 0; start < count;) {
    std::size_t end = start;
    while (end < count && entries[order[end]] == entries[order[start]]) ++end;
    const double mid_rank = 0.5 * static_cast<double>(start + end - 1);
    const double u = (mid_rank + 0.5) / static_cast<double>(count);
    const double value = target.quantile(u);
    for (std::size_t k = start; k < end; ++k) mapped[order[k]] = value;
    start = end;
  }

  GramMatrix out = g;
  std::size_t idx = 0;
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = i; j < g.n; ++j) {
      out(i, j) = mapped[idx];
      out(j, i) = mapped[idx];
      ++idx;
    }
  }
  return out;
}

GramMatrix multi_ref_gram(const std::vector<GramMatrix>& ref_grams, const ReferenceSet& refs) {
  if (ref_grams.empty()) throw ShapeError("multi_ref_gram: empty reference set");
  GramMatrix combined = elementwise_max(ref_grams);
  if (refs.mode == HistogramMode::identity) return combined;
  if (refs.target) return histogram_specify(combined, *refs.target);
  // The averaged default histogram of a single reference is that reference's
  // own distribution, so H is the identity there.
  if (ref_grams.size() == 1) return combined;
  return histogram_specify(combined, average_entry_histogram(ref_grams, refs.bins));
}

GramMatrix multi_ref_gram(const ReferenceSet& refs, const Network& net, LayerId layer) {
  refs.validate();
  std::vector<GramMatrix> grams;
  grams.reserve(refs.images.size());
  for (const Image& img : refs.images) {
    const FeatureStack fs = extract_features(net, img, {layer});
    grams.push_back(gram(fs.at(layer), layer));
  }
  return multi_ref_gram(grams, refs);
}

std::map<LayerId, GramMatrix> multi_ref_targets(const ReferenceSet& refs, const Network& net,
                                                const LossWeights& weights) {
  refs.validate();
  std::set<LayerId> ids;
  for (const auto& [id, w] : weights.layer_weights) ids.insert(id);
  std::map<LayerId, std::vector<GramMatrix>> per_layer;
  for (const Image& img : refs.images) {
    const FeatureStack fs = extract_features(net, img, ids);
    for (LayerId id : ids) per_layer[id].push_back(gram(fs.at(id), id));
  }
  std::map<LayerId, GramMatrix> targets;
  for (auto& [id, grams] : per_layer) {
    targets[id] = multi_ref_gram(grams, refs);
    targets[id].layer = id;
  }
  return targets;
}

namespace {

const GramMatrix& target_for(const std::map<LayerId, GramMatrix>& targets, LayerId id) {
  auto it = targets.find(id);
  if (it == targets.end()) throw ShapeError("no multi-reference target for layer " + std::to_string(id));
  return it->second;
}

}  // namespace

double multi_ref_style_loss(const FeatureStack& f_hat, const std::map<LayerId, GramMatrix>& targets,
                            const LossWeights& weights) {
  weights.validate();
  double total = 0.0;
  for (const auto& [id, w] : weights.layer_weights) {
    const GramMatrix& t = target_for(targets, id);
    total += w * style_layer_loss(gram(f_hat.at(id), id), t, f_hat.channels(id), f_hat.spatial(id));
  }
  return total;
}

double multi_ref_style_loss(const FeatureStack& f_hat, const ReferenceSet& refs, const Network& net,
                            const LossWeights& weights) {
  return multi_ref_style_loss(f_hat, multi_ref_targets(refs, net, weights), weights);
}

double proposed_style_loss(const FeatureStack& f_hat, const std::map<LayerId, GramMatrix>& targets,
                           const LossWeights& weights) {
  weights.validate();
  double total = 0.0;
  for (const auto& [id, w] : weights.layer_weights) {
    const GramMatrix& t = target_for(targets, id);
    const MapView f = view(f_hat.at(id), "proposed_style_loss");
    if (t.n != f.n) {
      throw ShapeError("proposed_style_loss: layer " + std::to_string(id) + " has " + std::to_string(f.n) +
                       " channels, target has " + std::to_string(t.n));
    }
    // sum k(f,f) + ||T||^2 - 2 sum_k f_k^T T f_k: the polynomial-kernel
    // expansion with the reference cross terms folded into T.
    const double self = poly2_kernel_sum(f, f);
    double target_sq = 0.0;
    for (double v : t.entries) target_sq += v * v;
    double cross = 0.0;
    for (std::size_t k = 0; k < f.m; ++k) {
      for (std::size_t i = 0; i < f.n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < f.n; ++j) row += t(i, j) * f(j, k);
        cross += f(i, k) * row;
      }
    }
    const double nm = static_cast<double>(f.n) * static_cast<double>(f.m);
    total += w * (self + target_sq - 2.0 * cross) / (4.0 * nm * nm);
  }
  return weights.gamma_beta_prime * total;
}

double proposed_style_loss(const FeatureStack& f_hat, const ReferenceSet& refs, const Network& net,
                           const LossWeights& weights) {
  return proposed_style_loss(f_hat, multi_ref_targets(refs, net, weights), weights);
}

double total_loss(double content_term, double style_term, const LossWeights& weights) {
  if (!std::isfinite(content_term) || !std::isfinite(style_term)) {
    throw ShapeError("total_loss: non-finite loss term");
  }
  return weights.alpha * content_term + weights.beta * style_term;
}

Tensor content_loss_gradient(const Tensor& f_hat, const Tensor& f_c) {
  return elementwise(ElementOp::sub, f_hat, f_c);
}

Tensor style_layer_gradient(const Tensor& f_hat, const GramMatrix& target) {
  const MapView f = view(f_hat, "style_layer_gradient");
  if (target.n != f.n) throw ShapeError("style_layer_gradient: target size does not match channels");
  const GramMatrix g = gram(f_hat);
  std::vector<double> diff(f.n * f.n);
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = g.entries[i] - target.entries[i];
  // dE/dF = (G - T_sym) F / (N^2 M^2); T is symmetrized for non-symmetric targets.
  const double nm = static_cast<double>(f.n) * static_cast<double>(f.m);
  const double scale = 1.0 / (nm * nm);
  Tensor out(f_hat.shape());
  for (std::size_t i = 0; i < f.n; ++i) {
    for (std::size_t k = 0; k < f.m; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < f.n; ++j) acc += 0.5 * (diff[i * f.n + j] + diff[j * f.n + i]) * f(j, k);
      out[i * f.m + k] = scale * acc;
    }
  }
  return out;
}

}  // namespace nstaug
