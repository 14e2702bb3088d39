#include "emprobe/records.hpp"

#include <cmath>
#include <numeric>

#include "emprobe/error.hpp"

namespace emprobe {

namespace {

bool all_finite(const double* data, Eigen::Index n) {
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(data[i])) return false;
  }
  return true;
}

}  // namespace

void EmbeddingMatrix::validate() const {
  if (data.rows() < 1 || data.cols() < 1) throw InvariantError("embedding matrix must be at least 1x1");
  if (!all_finite(data.data(), data.size())) throw InvariantError("embedding matrix has non-finite values");
  if (!vocab_labels.empty() && vocab_labels.size() != rows()) {
    throw InvariantError("vocab label count does not match embedding rows");
  }
}

void ProbStats::add(const Eigen::Ref<const Vector>& distribution) {
  sum += distribution;
  ++positions;
}

void ProbStats::merge(const ProbStats& other) {
  if (other.vocab_size() != vocab_size()) throw InvariantError("probstats vocab sizes differ");
  sum += other.sum;
  positions += other.positions;
}

void ProbStats::validate() const {
  if (sum.size() < 1) throw InvariantError("probstats vocab size must be >= 1");
  if (positions < 1) throw InvariantError("probstats positions must be >= 1");
  for (Eigen::Index i = 0; i < sum.size(); ++i) {
    if (!std::isfinite(sum[i]) || sum[i] < 0.0) throw InvariantError("probstats sum must be finite and nonnegative");
  }
  const double total = sum.sum();
  const double n = static_cast<double>(positions);
  if (std::abs(total - n) > 1e-9 * n) {
    throw InvariantError("probstats sum total does not match positions");
  }
}

void CorpusFreq::validate() const {
  if (counts.empty()) throw InvariantError("corpus frequency vocab size must be >= 1");
  if (total < 1) throw InvariantError("corpus frequency total must be >= 1");
  const std::uint64_t sum = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  if (sum != total) throw InvariantError("corpus frequency counts do not sum to total");
}

Vector CorpusFreq::relative() const {
  Vector out(static_cast<Eigen::Index>(counts.size()));
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = static_cast<double>(counts[i]) / static_cast<double>(total);
  }
  return out;
}

void EncodingFit::validate() const {
  if (direction.size() < 1) throw InvariantError("fit has no coefficients");
  if (p_values.size() != direction.size()) throw InvariantError("fit p-value count differs from direction");
  if (dof < 1) throw InvariantError("fit degrees of freedom must be >= 1");
  if (!all_finite(direction.data(), direction.size()) || !std::isfinite(intercept)) {
    throw InvariantError("fit coefficients must be finite");
  }
  for (Eigen::Index i = 0; i < p_values.size(); ++i) {
    if (!(p_values[i] >= 0.0 && p_values[i] <= 1.0)) throw InvariantError("fit p-values must lie in [0, 1]");
  }
  if (!(adj_r2 <= 1.0)) throw InvariantError("fit adjusted R^2 must be <= 1");
}

void SyntheticCorpus::validate() const {
  if (vocab_size < 1) throw InvariantError("corpus vocab size must be >= 1");
  for (TokenId t : tokens) {
    if (t >= vocab_size) throw InvariantError("corpus token out of vocabulary range");
  }
}

void MicroConfig::validate() const {
  if (vocab_size < 2 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || context < 1) {
    throw ConfigError("config sizes must be positive (vocab >= 2)");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (vocab_size <= head_width() + 2) {
    throw ConfigError("vocab_size must exceed head width + 2 so the encoding fit has residual dof");
  }
  if (tied && head_bias) throw ConfigError("head bias mode is not supported with tied embeddings");
}

const RowMatrix& Checkpoint::param(const std::string& name) const {
  for (const auto& [key, value] : params) {
    if (key == name) return value;
  }
  throw InvariantError("checkpoint has no parameter '" + name + "'");
}

RowMatrix& Checkpoint::param(const std::string& name) {
  return const_cast<RowMatrix&>(static_cast<const Checkpoint&>(*this).param(name));
}

bool Checkpoint::has_param(const std::string& name) const {
  for (const auto& entry : params) {
    if (entry.first == name) return true;
  }
  return false;
}

const RowMatrix& Checkpoint::output_embedding() const {
  return config.tied ? param("tok_emb") : param("out_emb");
}

RowMatrix& Checkpoint::output_embedding() { return config.tied ? param("tok_emb") : param("out_emb"); }

void Checkpoint::validate() const {
  config.validate();
  const auto d = static_cast<Eigen::Index>(config.d_model);
  const auto v = static_cast<Eigen::Index>(config.vocab_size);
  for (const auto& [name, value] : params) {
    if (!all_finite(value.data(), value.size())) throw InvariantError("checkpoint parameter '" + name + "' is not finite");
  }
  const RowMatrix& tok = param("tok_emb");
  if (tok.rows() != v || tok.cols() != d) throw InvariantError("tok_emb shape inconsistent with config");
  if (param("pos_emb").rows() != static_cast<Eigen::Index>(config.context)) {
    throw InvariantError("pos_emb shape inconsistent with config");
  }
  if (config.tied == has_param("out_emb")) throw InvariantError("out_emb presence inconsistent with tied flag");
  const RowMatrix& out = output_embedding();
  if (out.rows() != v || out.cols() != static_cast<Eigen::Index>(config.head_width())) {
    throw InvariantError("output embedding shape inconsistent with config");
  }
  for (std::uint64_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      const RowMatrix& m = param(p + w);
      if (m.rows() != d || m.cols() != d) throw InvariantError("attention map shape inconsistent with config");
    }
    if (param(p + "ff.w1").cols() != static_cast<Eigen::Index>(config.d_ff)) {
      throw InvariantError("feed-forward shape inconsistent with config");
    }
  }
}

}  // namespace emprobe
