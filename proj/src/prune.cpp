#include "emprobe/prune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "emprobe/error.hpp"
#include "emprobe/report.hpp"
#include "emprobe/rng.hpp"

namespace emprobe::prune {

Order parse_order(std::string_view name) {
  if (name == "ascending") return Order::ascending;
  if (name == "descending") return Order::descending;
  if (name == "random") return Order::random;
  throw ConfigError("unknown removal order '" + std::string(name) + "'");
}

std::string_view to_string(Order order) {
  switch (order) {
    case Order::ascending: return "ascending";
    case Order::descending: return "descending";
    case Order::random: return "random";
  }
  return "ascending";
}

std::vector<std::size_t> rank_dimensions(const EncodingFit& fit) {
  std::vector<std::size_t> order(fit.dims());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(fit.direction[static_cast<Eigen::Index>(a)]) < std::abs(fit.direction[static_cast<Eigen::Index>(b)]);
  });
  return order;
}

std::vector<std::size_t> removal_order(const EncodingFit& fit, Order order, std::uint64_t seed) {
  std::vector<std::size_t> out(fit.dims());
  std::iota(out.begin(), out.end(), std::size_t{0});
  switch (order) {
    case Order::ascending:
      return rank_dimensions(fit);
    case Order::descending:
      std::stable_sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(fit.direction[static_cast<Eigen::Index>(a)]) >
               std::abs(fit.direction[static_cast<Eigen::Index>(b)]);
      });
      return out;
    case Order::random: {
      Rng rng(seed);
      for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
      return out;
    }
  }
  return out;
}

void zero_columns_inplace(RowMatrix& m, const std::vector<std::size_t>& dims) {
  for (std::size_t j : dims) {
    if (j >= static_cast<std::size_t>(m.cols())) throw InvariantError("dimension " + std::to_string(j) + " out of range");
  }
  for (std::size_t j : dims) m.col(static_cast<Eigen::Index>(j)).setZero();
}

EmbeddingMatrix zero_dimensions(const EmbeddingMatrix& emb, const std::vector<std::size_t>& dims) {
  EmbeddingMatrix out = emb;
  zero_columns_inplace(out.data, dims);
  return out;
}

EmbeddingMatrix compact_dimensions(const EmbeddingMatrix& emb, const std::vector<std::size_t>& dims) {
  std::vector<bool> drop(emb.cols(), false);
  for (std::size_t j : dims) {
    if (j >= emb.cols()) throw InvariantError("dimension " + std::to_string(j) + " out of range");
    drop[j] = true;
  }
  std::vector<Eigen::Index> keep;
  for (std::size_t j = 0; j < emb.cols(); ++j) {
    if (!drop[j]) keep.push_back(static_cast<Eigen::Index>(j));
  }
  if (keep.empty()) throw InvariantError("compaction would remove every dimension");
  EmbeddingMatrix out;
  out.tied = emb.tied;
  out.vocab_labels = emb.vocab_labels;
  out.data.resize(emb.data.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) out.data.col(static_cast<Eigen::Index>(c)) = emb.data.col(keep[c]);
  return out;
}

namespace {

std::map<std::vector<TokenId>, double> kgram_distribution(const std::vector<TokenSeq>& set, std::size_t k) {
  std::map<std::vector<TokenId>, double> counts;
  double total = 0.0;
  for (const auto& seq : set) {
    for (std::size_t i = 0; i + k <= seq.size(); ++i) {
      counts[std::vector<TokenId>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                  seq.begin() + static_cast<std::ptrdiff_t>(i + k))] += 1.0;
      total += 1.0;
    }
  }
  if (total == 0.0) throw InvariantError("generation set has no k-grams");
  for (auto& [key, c] : counts) c /= total;
  return counts;
}

}  // namespace

double generation_similarity(const std::vector<TokenSeq>& a, const std::vector<TokenSeq>& b, std::size_t k) {
  if (k < 1) throw InvariantError("k-gram order must be >= 1");
  const auto pa = kgram_distribution(a, k);
  const auto pb = kgram_distribution(b, k);
  // JS = 1/2 sum p log2(2p/(p+q)) + 1/2 sum q log2(2q/(p+q))
  double js = 0.0;
  auto ia = pa.begin();
  auto ib = pb.begin();
  while (ia != pa.end() || ib != pb.end()) {
    double p = 0.0, q = 0.0;
    if (ib == pb.end() || (ia != pa.end() && ia->first < ib->first)) {
      p = (ia++)->second;
    } else if (ia == pa.end() || ib->first < ia->first) {
      q = (ib++)->second;
    } else {
      p = (ia++)->second;
      q = (ib++)->second;
    }
    const double m = 0.5 * (p + q);
    if (p > 0.0) js += 0.5 * p * std::log2(p / m);
    if (q > 0.0) js += 0.5 * q * std::log2(q / m);
  }
  return std::clamp(1.0 - js, 0.0, 1.0);
}

double kl_divergence(const Vector& p, const Vector& q, double floor) {
  if (p.size() != q.size()) throw InvariantError("distributions differ in length");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / std::max(q[i], floor));
  }
  return std::max(kl, 0.0);
}

MicroPruneContext::MicroPruneContext(const lm::Model& model, std::vector<TokenSeq> eval_set,
                                     std::optional<GenerationSettings> gen)
    : model_(model), eval_set_(std::move(eval_set)), gen_(gen) {
  if (eval_set_.empty()) throw InvariantError("pruning evaluation set is empty");
  if (gen_ && gen_->prefix_length < 1) throw InvariantError("generation prefix must be >= 1 token");
  if (!model_.config().tied) hidden_ = lm::collect_hidden(model_, eval_set_);
}

lm::Model MicroPruneContext::pruned_model(const std::vector<std::size_t>& removed) const {
  lm::Model m = model_;
  zero_columns_inplace(m.output_embedding(), removed);
  return m;
}

Vector MicroPruneContext::averaged_distribution(const std::vector<std::size_t>& removed) const {
  if (!model_.config().tied) {
    RowMatrix emb = model_.output_embedding();
    zero_columns_inplace(emb, removed);
    return lm::head_average(hidden_, emb);
  }
  const lm::Model m = pruned_model(removed);
  const ProbStats stats = lm::accumulate_probs(m, eval_set_);
  return stats.sum / static_cast<double>(stats.positions);
}

std::vector<TokenSeq> MicroPruneContext::generations(const std::vector<std::size_t>& removed) const {
  std::vector<TokenSeq> out;
  if (!gen_) return out;
  const lm::Model m = pruned_model(removed);
  out.reserve(gen_->count);
  for (std::size_t i = 0; i < gen_->count; ++i) {
    const TokenSeq& source = eval_set_[i % eval_set_.size()];
    const std::size_t plen = std::min(gen_->prefix_length, source.size());
    lm::GenerateOptions opts;
    opts.temperature = gen_->temperature;
    opts.seed = gen_->seed + i;  // common random numbers across compared models
    out.push_back(lm::generate(m, std::span<const TokenId>(source.data(), plen), gen_->length, opts));
  }
  return out;
}

PruneSweep prune_sweep(const EncodingFit& fit, std::vector<double> ratios, Order order,
                       const MicroPruneContext& context, std::uint64_t seed) {
  if (fit.dims() != context.width()) throw InvariantError("fit width does not match the output embedding");
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw InvariantError("removal ratios must lie in [0, 1]");
  }
  std::sort(ratios.begin(), ratios.end());

  PruneSweep sweep;
  sweep.order = order;
  sweep.ratios = ratios;
  sweep.saliency = fit.direction.cwiseAbs();
  const std::vector<std::size_t> schedule = removal_order(fit, order, seed);
  const Vector original = context.averaged_distribution({});
  const std::vector<TokenSeq> original_gen = context.generations({});

  for (double r : ratios) {
    SweepPoint point;
    point.ratio = r;
    point.removed = static_cast<std::size_t>(std::floor(r * static_cast<double>(schedule.size()) + 1e-9));
    const std::vector<std::size_t> removed(schedule.begin(),
                                           schedule.begin() + static_cast<std::ptrdiff_t>(point.removed));
    point.kl_divergence = kl_divergence(context.averaged_distribution(removed), original);
    point.gen_similarity = context.has_generation()
                               ? generation_similarity(context.generations(removed), original_gen)
                               : std::numeric_limits<double>::quiet_NaN();
    sweep.results.push_back(point);
  }
  return sweep;
}

std::string sweep_csv(const std::vector<PruneSweep>& sweeps) {
  std::ostringstream out;
  out << "ratio,order,kl,gen_similarity\n";
  for (const auto& s : sweeps) {
    for (const auto& p : s.results) {
      out << report::format_real(p.ratio) << ',' << to_string(s.order) << ',' << report::format_real(p.kl_divergence)
          << ',' << report::format_real(p.gen_similarity) << '\n';
    }
  }
  return out.str();
}

}  // namespace emprobe::prune
