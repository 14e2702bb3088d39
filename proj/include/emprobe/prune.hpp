#pragma once

// Saliency-ordered removal of output-embedding dimensions and the
// degradation curves that judge the ordering.

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "emprobe/microlm.hpp"
#include "emprobe/records.hpp"

namespace emprobe::prune {

enum class Order { ascending, descending, random };

Order parse_order(std::string_view name);
std::string_view to_string(Order order);

/// Dimension indices sorted by |slope| ascending, lower index first on ties.
std::vector<std::size_t> rank_dimensions(const EncodingFit& fit);

/// Full removal schedule for an order. `seed` only matters for Order::random.
std::vector<std::size_t> removal_order(const EncodingFit& fit, Order order, std::uint64_t seed = 0);

/// Copy with the listed columns set to zero.
EmbeddingMatrix zero_dimensions(const EmbeddingMatrix& emb, const std::vector<std::size_t>& dims);
void zero_columns_inplace(RowMatrix& m, const std::vector<std::size_t>& dims);

/// Physically drops the listed columns (optional compaction pass).
EmbeddingMatrix compact_dimensions(const EmbeddingMatrix& emb, const std::vector<std::size_t>& dims);

/// Jensen-Shannon similarity (1 - JS divergence in bits) between the k-gram
/// distributions of two generation sets. 1 for identical distributions.
double generation_similarity(const std::vector<TokenSeq>& a, const std::vector<TokenSeq>& b, std::size_t k = 2);

/// KL(p || q) in nats with q floored at `floor`.
double kl_divergence(const Vector& p, const Vector& q, double floor = 1e-12);

struct GenerationSettings {
  std::size_t count = 512;
  std::size_t length = 64;
  std::size_t prefix_length = 2;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Evaluation harness on the micro-LM: averaged distribution over an
/// evaluation set and seeded generations, for a given set of removed
/// dimensions. For tied models the same input-embedding columns are zeroed.
class MicroPruneContext {
 public:
  MicroPruneContext(const lm::Model& model, std::vector<TokenSeq> eval_set, std::optional<GenerationSettings> gen);

  Vector averaged_distribution(const std::vector<std::size_t>& removed) const;
  /// Empty when generation is disabled.
  std::vector<TokenSeq> generations(const std::vector<std::size_t>& removed) const;
  bool has_generation() const { return gen_.has_value(); }
  std::size_t width() const { return static_cast<std::size_t>(model_.output_embedding().cols()); }

  lm::Model pruned_model(const std::vector<std::size_t>& removed) const;

 private:
  lm::Model model_;
  std::vector<TokenSeq> eval_set_;
  RowMatrix hidden_;  // cached trunk output, untied models only
  std::optional<GenerationSettings> gen_;
};

struct SweepPoint {
  double ratio = 0.0;
  std::size_t removed = 0;
  double kl_divergence = 0.0;  // KL(pruned || original)
  double gen_similarity = 1.0; // NaN when generation is disabled
};

struct PruneSweep {
  Order order = Order::ascending;
  std::vector<double> ratios;
  Vector saliency;  // |slope| per dimension
  std::vector<SweepPoint> results;
};

/// For each ratio r removes the first floor(r * d) dimensions of the order
/// and compares against the unpruned model. Ratios must lie in [0, 1]; they
/// are sorted ascending in the result.
PruneSweep prune_sweep(const EncodingFit& fit, std::vector<double> ratios, Order order,
                       const MicroPruneContext& context, std::uint64_t seed = 0);

std::string sweep_csv(const std::vector<PruneSweep>& sweeps);

}  // namespace emprobe::prune
