#pragma once

// Value types persisted by the tensor store and shared by every module.

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace emprobe {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

/// |V| x d output (or input) embedding with optional token strings.
struct EmbeddingMatrix {
  RowMatrix data;
  std::vector<std::string> vocab_labels;  // empty, or one per row
  bool tied = false;

  std::size_t rows() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(data.cols()); }
  void validate() const;
};

/// Sufficient statistics for an averaged output distribution: the elementwise
/// sum of per-position distributions plus the number of positions.
struct ProbStats {
  Vector sum;
  std::uint64_t positions = 0;

  ProbStats() = default;
  explicit ProbStats(std::size_t vocab_size) : sum(Vector::Zero(static_cast<Eigen::Index>(vocab_size))) {}

  std::size_t vocab_size() const { return static_cast<std::size_t>(sum.size()); }
  void add(const Eigen::Ref<const Vector>& distribution);
  void merge(const ProbStats& other);
  void validate() const;
};

struct CorpusFreq {
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;

  std::size_t vocab_size() const { return counts.size(); }
  void validate() const;
  /// Relative frequencies counts / total.
  Vector relative() const;
};

/// Result of regressing targets on features with an intercept.
struct EncodingFit {
  Vector direction;  // slope per feature
  double intercept = 0.0;
  Vector p_values;   // two-sided, per slope
  double adj_r2 = 0.0;
  double r2 = 0.0;
  std::uint64_t dof = 0;  // n - d - 1
  double residual_variance = 0.0;
  double floor = 0.0;  // probability floor applied before the log, 0 if none

  std::size_t dims() const { return static_cast<std::size_t>(direction.size()); }
  void validate() const;
};

enum class CorpusGenerator : std::uint8_t { zipf_unigram = 0, markov_bigram = 1 };

struct SyntheticCorpus {
  TokenSeq tokens;
  std::uint64_t vocab_size = 0;
  double zipf_exponent = 1.0;
  std::uint64_t seed = 0;
  CorpusGenerator generator = CorpusGenerator::zipf_unigram;

  void validate() const;
};

struct MicroConfig {
  std::uint64_t vocab_size = 256;
  std::uint64_t d_model = 64;
  std::uint64_t n_layers = 2;
  std::uint64_t n_heads = 2;
  std::uint64_t d_ff = 256;
  std::uint64_t context = 64;
  bool tied = false;
  bool head_bias = false;  // augments the final hidden state with a constant-one dimension
  std::uint64_t seed = 0;

  /// Width of output embedding rows (d_model, plus one in head-bias mode).
  std::uint64_t head_width() const { return d_model + (head_bias ? 1 : 0); }
  /// Throws ConfigError.
  void validate() const;
};

/// Full parameter snapshot of the micro language model at one training step.
struct Checkpoint {
  std::uint64_t step = 0;
  MicroConfig config;
  std::vector<std::pair<std::string, RowMatrix>> params;  // fixed model order
  std::string rng_state;
  std::string metadata;  // optimizer and schedule description

  const RowMatrix& param(const std::string& name) const;
  RowMatrix& param(const std::string& name);
  bool has_param(const std::string& name) const;
  /// The output embedding; the input embedding when the config is tied.
  const RowMatrix& output_embedding() const;
  RowMatrix& output_embedding();
  void validate() const;
};

}  // namespace emprobe
