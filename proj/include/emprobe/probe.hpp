#pragma once

// Averaged output probabilities, the log-linear encoding fit and the
// sparsity statistics around it.

#include <span>
#include <utility>

#include "emprobe/records.hpp"

namespace emprobe::probe {

inline constexpr double kDefaultFloor = 1e-12;

/// sum / positions. Throws InvariantError when positions == 0.
Vector finalize_avg_prob(const ProbStats& stats);

/// Ordinary least squares of `targets` on `features` plus an intercept column.
/// Solved by column-pivoted Householder QR. Requires n >= d + 2 and full
/// column rank of [1 | features]; throws InvariantError otherwise.
EncodingFit ols_fit(const Vector& targets, const RowMatrix& features);

/// -log(max(alpha_w, floor)) for each token.
Vector neg_log_targets(const Vector& alpha, double floor);

/// Regresses -log alpha on the embedding rows.
EncodingFit fit_encoding(const Vector& alpha, const EmbeddingMatrix& emb, double floor = kDefaultFloor);

/// Mean adj_r2 over `draws` fits whose alpha is a normalized uniform random
/// vector, the chance-level reference for fit_encoding.
double random_baseline_adj_r2(const EmbeddingMatrix& emb, std::size_t draws = 10, std::uint64_t seed = 0,
                              double floor = kDefaultFloor);

struct PcaResult {
  RowMatrix components;    // k x d, orthonormal rows
  Vector variance_ratio;   // length k, fraction of total variance
  RowMatrix scores;        // |V| x k, centered rows projected on components
};

/// Column-centered PCA via SVD. Requires 1 <= k <= min(rows, cols).
PcaResult pca(const RowMatrix& data, std::size_t k);
inline PcaResult pca(const EmbeddingMatrix& emb, std::size_t k) { return pca(emb.data, k); }

/// Fractional ranks, 1-based, ties get the average of their positions.
Vector fractional_ranks(std::span<const double> values);

/// Pearson correlation of fractional ranks. Needs equal lengths >= 3 and
/// nonzero rank variance in both inputs.
double spearman(std::span<const double> x, std::span<const double> y);
inline double spearman(const Vector& x, const Vector& y) {
  return spearman(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())),
                  std::span<const double>(y.data(), static_cast<std::size_t>(y.size())));
}

struct SparsityReport {
  Vector pc_spearman;        // |r_s(score_j, -log alpha)| per principal component
  Vector pc_variance_ratio;  // all min(|V|, d) components, sums to 1
  Vector dim_slopes;         // |fitted slope| per original dimension
  Vector dim_spearman;       // |r_s(column_j, -log alpha)|
  bool centered = true;      // PCA mean-subtracts columns
};

SparsityReport sparsity_report(const Vector& alpha, const EmbeddingMatrix& emb, double floor = kDefaultFloor);
/// Same report reusing a fit computed by the caller.
SparsityReport sparsity_report(const Vector& alpha, const EmbeddingMatrix& emb, const EncodingFit& fit,
                               double floor = kDefaultFloor);

struct ApproxError {
  double actual_sq_error;  // (log mean p - mean log p)^2
  double bound;            // ((mean p - p_min) / p_min)^2
};

/// Error of swapping the log and the mean for one token's per-position
/// probabilities, with its upper bound. All elements must be > 0.
ApproxError approx_error_bound(std::span<const double> probs);

}  // namespace emprobe::probe
