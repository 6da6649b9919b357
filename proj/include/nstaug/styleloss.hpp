#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "nstaug/featnet.hpp"
#include "nstaug/tensor.hpp"

namespace nstaug {

/// Channel correlation matrix G = F F^T of one layer, N x N row-major.
struct GramMatrix {
  std::size_t n = 0;
  std::vector<double> entries;
  LayerId layer = 0;

  double operator()(std::size_t i, std::size_t j) const { return entries[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return entries[i * n + j]; }
};

bool is_symmetric(const GramMatrix& g, double tol = 1e-12);
double min_eigenvalue(const GramMatrix& g);

/// Weights of the total objective. The style term is scaled by
/// gamma_beta_prime inside proposed_style_loss and by beta in total_loss.
struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  std::map<LayerId, double> layer_weights;  // w_l per style layer
  double gamma_beta_prime = 1.0;

  void validate() const;
  static LossWeights uniform(const std::vector<LayerId>& layers, double w = 1.0);
};

/// Target density for histogram specification: bin edges and masses.
struct DensityHistogram {
  std::vector<double> edges;   // size bins + 1, increasing
  std::vector<double> masses;  // nonnegative, sum to 1

  void validate() const;
  /// Inverse CDF with uniform mass inside each bin; u in [0,1].
  double quantile(double u) const;
};

enum class HistogramMode {
  identity,  // H is skipped
  match,     // entries remapped to match the target histogram
};

struct ReferenceSet {
  std::vector<Image> images;
  HistogramMode mode = HistogramMode::match;
  std::optional<DensityHistogram> target;  // default: averaged reference histogram
  std::size_t bins = 64;

  void validate() const;
};

enum class SpatialMismatch { reject, subsample };

struct MmdOptions {
  SpatialMismatch mismatch = SpatialMismatch::reject;
  std::uint64_t seed = 0;
};

// Content and Gram losses ----------------------------------------------------

/// 1/2 * sum (F(Î) - F(I_c))^2 at one layer.
double content_loss(const FeatureStack& f_hat, const FeatureStack& f_c, LayerId layer);
double content_loss(const Tensor& f_hat, const Tensor& f_c);

GramMatrix gram(const Tensor& feature_map, LayerId layer = 0);

/// E_l = sum (G_hat - G_ref)^2 / (4 N^2 M^2).
double style_layer_loss(const GramMatrix& g_hat, const GramMatrix& g_ref, std::size_t n_l, std::size_t m_l);

/// sum_l w_l E_l against single-reference Grams.
double style_loss(const FeatureStack& f_hat, const FeatureStack& f_s, const LossWeights& weights);

// Kernel forms ---------------------------------------------------------------

/// Full MMD^2 with k(x,y) = (x^T y)^2 over spatial columns, scaled by
/// 1/(4 N^2); equals the Gram loss when the spatial sizes match.
double mmd_poly2_style_loss(const Tensor& f_hat, const Tensor& f_s, const MmdOptions& opts = {});

struct ExpansionReport {
  double gram_form = 0.0;
  double kernel_form = 0.0;
  double relative_gap = 0.0;
};

/// Evaluates the Gram-difference form and the expanded kernel-sum form
/// independently.
ExpansionReport kernel_expansion_check(const Tensor& f_hat, const Tensor& f_s);

// Multi-reference ------------------------------------------------------------

/// Elementwise maximum of several Gram matrices.
GramMatrix elementwise_max(const std::vector<GramMatrix>& grams);

/// Average of the per-reference entry histograms over a shared range.
DensityHistogram average_entry_histogram(const std::vector<GramMatrix>& grams, std::size_t bins);

/// Monotone remap of the upper-triangle entries so their empirical CDF
/// follows `target`; the lower triangle mirrors the result.
GramMatrix histogram_specify(const GramMatrix& g, const DensityHistogram& target);

/// H(M(G_1..G_n), h̄) given precomputed reference Grams.
GramMatrix multi_ref_gram(const std::vector<GramMatrix>& ref_grams, const ReferenceSet& refs);
GramMatrix multi_ref_gram(const ReferenceSet& refs, const Network& net, LayerId layer);

/// Per-layer multi-reference targets for every weighted style layer.
std::map<LayerId, GramMatrix> multi_ref_targets(const ReferenceSet& refs, const Network& net,
                                                const LossWeights& weights);

/// sum_l w_l E_l with E_l measured against the multi-reference targets.
double multi_ref_style_loss(const FeatureStack& f_hat, const std::map<LayerId, GramMatrix>& targets,
                            const LossWeights& weights);
double multi_ref_style_loss(const FeatureStack& f_hat, const ReferenceSet& refs, const Network& net,
                            const LossWeights& weights);

/// Combined loss: per layer the second-order polynomial kernel expansion
/// against the multi-reference target, weighted by w_l and scaled by
/// gamma_beta_prime.
double proposed_style_loss(const FeatureStack& f_hat, const std::map<LayerId, GramMatrix>& targets,
                           const LossWeights& weights);
double proposed_style_loss(const FeatureStack& f_hat, const ReferenceSet& refs, const Network& net,
                           const LossWeights& weights);

double total_loss(double content_term, double style_term, const LossWeights& weights);

// Gradients w.r.t. feature maps ------------------------------------------------

/// d(content_loss)/dF_hat.
Tensor content_loss_gradient(const Tensor& f_hat, const Tensor& f_c);
/// dE_l/dF_hat for E_l against `target`.
Tensor style_layer_gradient(const Tensor& f_hat, const GramMatrix& target);

}  // namespace nstaug
