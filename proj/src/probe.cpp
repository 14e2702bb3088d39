#include "emprobe/probe.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <numeric>
#include <vector>

#include "emprobe/error.hpp"
#include "emprobe/rng.hpp"

namespace emprobe::probe {

namespace {

double two_sided_p(double t, double dof) {
  if (std::isnan(t)) return 1.0;
  if (std::isinf(t)) return 0.0;
  const boost::math::students_t dist(dof);
  return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
}

}  // namespace

Vector finalize_avg_prob(const ProbStats& stats) {
  if (stats.positions == 0) throw InvariantError("cannot average zero positions");
  return stats.sum / static_cast<double>(stats.positions);
}

EncodingFit ols_fit(const Vector& targets, const RowMatrix& features) {
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  if (targets.size() != n) throw InvariantError("targets and features disagree on sample count");
  if (d < 1) throw InvariantError("ols needs at least one feature");
  if (n < d + 2) throw InvariantError("ols needs n >= d + 2 (got n=" + std::to_string(n) + ", d=" + std::to_string(d) + ")");

  const Eigen::Index p = d + 1;
  Eigen::MatrixXd design(n, p);
  design.col(0).setOnes();
  design.rightCols(d) = features;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < p) throw InvariantError("ols design matrix is rank deficient");
  const Vector beta = qr.solve(targets);
  const Vector residual = targets - design * beta;
  const double rss = residual.squaredNorm();
  const double mean = targets.mean();
  const double tss = (targets.array() - mean).square().sum();

  EncodingFit fit;
  fit.intercept = beta[0];
  fit.direction = beta.tail(d);
  fit.dof = static_cast<std::uint64_t>(n - p);
  const double dof = static_cast<double>(fit.dof);
  fit.residual_variance = rss / dof;

  // A target vector that is constant up to rounding carries no variance to explain.
  const double scale = std::max(1.0, std::abs(mean)) * 1e-13;
  const bool no_variance = tss <= static_cast<double>(n) * scale * scale;
  fit.r2 = no_variance ? 0.0 : 1.0 - rss / tss;
  fit.adj_r2 = 1.0 - (1.0 - fit.r2) * static_cast<double>(n - 1) / dof;

  // diag((X^T X)^-1) from the pivoted R factor: squared row norms of R^-1.
  const Eigen::MatrixXd r = qr.matrixR().topLeftCorner(p, p).triangularView<Eigen::Upper>();
  const Eigen::MatrixXd r_inv = r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p, p));
  Vector xtx_inv_diag(p);
  const auto& perm = qr.colsPermutation().indices();
  for (Eigen::Index i = 0; i < p; ++i) xtx_inv_diag[perm[i]] = r_inv.row(i).squaredNorm();

  fit.p_values.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double se = std::sqrt(fit.residual_variance * xtx_inv_diag[j + 1]);
    const double b = fit.direction[j];
    if (se == 0.0) {
      fit.p_values[j] = b == 0.0 ? 1.0 : 0.0;
    } else {
      fit.p_values[j] = two_sided_p(b / se, dof);
    }
  }
  return fit;
}

Vector neg_log_targets(const Vector& alpha, double floor) {
  if (!(floor > 0.0)) throw InvariantError("probability floor must be > 0");
  return -alpha.array().max(floor).log().matrix();
}

EncodingFit fit_encoding(const Vector& alpha, const EmbeddingMatrix& emb, double floor) {
  if (static_cast<std::size_t>(alpha.size()) != emb.rows()) {
    throw InvariantError("alpha length does not match embedding rows");
  }
  EncodingFit fit = ols_fit(neg_log_targets(alpha, floor), emb.data);
  fit.floor = floor;
  return fit;
}

PcaResult pca(const RowMatrix& data, std::size_t k) {
  const auto rows = static_cast<std::size_t>(data.rows());
  const auto cols = static_cast<std::size_t>(data.cols());
  if (k < 1 || k > std::min(rows, cols)) throw InvariantError("pca component count out of range");

  const Eigen::MatrixXd centered = data.rowwise() - data.colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Vector sq = svd.singularValues().array().square();
  const double total = sq.sum();

  const auto kk = static_cast<Eigen::Index>(k);
  PcaResult out;
  out.components = svd.matrixV().leftCols(kk).transpose();
  // Deterministic sign: the largest-magnitude loading of each component is positive.
  for (Eigen::Index c = 0; c < kk; ++c) {
    Eigen::Index arg = 0;
    out.components.row(c).cwiseAbs().maxCoeff(&arg);
    if (out.components(c, arg) < 0) out.components.row(c) *= -1.0;
  }
  out.variance_ratio = total > 0 ? Vector(sq.head(kk) / total) : Vector::Zero(kk);
  out.scores = centered * out.components.transpose();
  return out;
}

Vector fractional_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  Vector ranks(static_cast<Eigen::Index>(n));
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[static_cast<Eigen::Index>(order[t])] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvariantError("spearman inputs differ in length");
  if (x.size() < 3) throw InvariantError("spearman needs at least 3 observations");
  Vector rx = fractional_ranks(x);
  Vector ry = fractional_ranks(y);
  rx.array() -= rx.mean();
  ry.array() -= ry.mean();
  const double sx = rx.squaredNorm();
  const double sy = ry.squaredNorm();
  if (sx == 0.0 || sy == 0.0) throw InvariantError("spearman input has zero rank variance");
  return std::clamp(rx.dot(ry) / std::sqrt(sx * sy), -1.0, 1.0);
}

namespace {

double abs_spearman_or_zero(const Vector& x, const Vector& y) {
  // A constant column carries no rank information.
  if (x.maxCoeff() == x.minCoeff()) return 0.0;
  return std::abs(spearman(x, y));
}

}  // namespace

SparsityReport sparsity_report(const Vector& alpha, const EmbeddingMatrix& emb, double floor) {
  return sparsity_report(alpha, emb, fit_encoding(alpha, emb, floor), floor);
}

SparsityReport sparsity_report(const Vector& alpha, const EmbeddingMatrix& emb, const EncodingFit& fit,
                               double floor) {
  if (fit.dims() != emb.cols()) throw InvariantError("fit width does not match embedding");
  const Vector target = neg_log_targets(alpha, floor);
  if (target.maxCoeff() == target.minCoeff()) throw InvariantError("-log alpha is constant; no ranking to correlate");

  const std::size_t k = std::min(emb.rows(), emb.cols());
  const PcaResult p = pca(emb.data, k);

  SparsityReport report;
  report.pc_variance_ratio = p.variance_ratio;
  report.pc_spearman.resize(static_cast<Eigen::Index>(k));
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(k); ++j) {
    report.pc_spearman[j] = abs_spearman_or_zero(p.scores.col(j), target);
  }
  report.dim_slopes = fit.direction.cwiseAbs();
  report.dim_spearman.resize(emb.data.cols());
  for (Eigen::Index j = 0; j < emb.data.cols(); ++j) {
    report.dim_spearman[j] = abs_spearman_or_zero(emb.data.col(j), target);
  }
  return report;
}

ApproxError approx_error_bound(std::span<const double> probs) {
  if (probs.empty()) throw InvariantError("approximation bound needs at least one probability");
  double p0 = probs[0];
  for (double p : probs) {
    if (!(p > 0.0)) throw InvariantError("approximation bound needs strictly positive probabilities");
    p0 = std::min(p0, p);
  }
  // Work relative to the minimum so both sides stay accurate when p is concentrated.
  const double n = static_cast<double>(probs.size());
  double mean_rel = 0.0;
  double mean_log_rel = 0.0;
  for (double p : probs) {
    const double u = (p - p0) / p0;
    mean_rel += u;
    mean_log_rel += std::log1p(u);
  }
  mean_rel /= n;
  mean_log_rel /= n;
  const double gap = std::log1p(mean_rel) - mean_log_rel;
  return {gap * gap, mean_rel * mean_rel};
}

double random_baseline_adj_r2(const EmbeddingMatrix& emb, std::size_t draws, std::uint64_t seed, double floor) {
  if (draws == 0) throw InvariantError("random baseline needs at least one draw");
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t k = 0; k < draws; ++k) {
    Vector alpha(static_cast<Eigen::Index>(emb.rows()));
    for (Eigen::Index i = 0; i < alpha.size(); ++i) alpha[i] = rng.uniform();
    alpha /= alpha.sum();
    total += fit_encoding(alpha, emb, floor).adj_r2;
  }
  return total / static_cast<double>(draws);
}

}  // namespace emprobe::probe
