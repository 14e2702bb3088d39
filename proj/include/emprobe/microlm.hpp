#pragma once

// A small pre-norm transformer decoder with hand-written backpropagation,
// trained in double precision. It stands in for a pretrained causal LM and
// produces the probability dumps, embeddings and checkpoints the analyses use.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emprobe/records.hpp"
#include "emprobe/rng.hpp"

namespace emprobe::lm {

struct LayerParams {
  RowMatrix ln1_gain, ln1_bias;  // 1 x d
  RowMatrix wq, wk, wv, wo;      // d x d, row-vector convention: q = x * wq
  RowMatrix ln2_gain, ln2_bias;  // 1 x d
  RowMatrix w1, b1;              // d x f, 1 x f
  RowMatrix w2, b2;              // f x d, 1 x d
};

struct Params {
  RowMatrix tok_emb;  // V x d, input embedding
  RowMatrix pos_emb;  // context x d
  std::vector<LayerParams> layers;
  RowMatrix lnf_gain, lnf_bias;  // 1 x d
  RowMatrix out_emb;             // V x head_width; empty when tied

  /// Zero-filled parameters with the shapes implied by `config`.
  static Params zeros(const MicroConfig& config);

  /// Visits every parameter in the fixed checkpoint order.
  void for_each(const std::function<void(const std::string&, RowMatrix&)>& fn);
  void for_each(const std::function<void(const std::string&, const RowMatrix&)>& fn) const;
};

class Model {
 public:
  /// Random initialization from config.seed.
  explicit Model(const MicroConfig& config);
  Model(const MicroConfig& config, Params params);

  static Model from_checkpoint(const Checkpoint& checkpoint);
  Checkpoint to_checkpoint(std::uint64_t step, std::string rng_state = {}, std::string metadata = {}) const;

  const MicroConfig& config() const { return config_; }
  const Params& params() const { return params_; }
  Params& params() { return params_; }

  const RowMatrix& output_embedding() const { return config_.tied ? params_.tok_emb : params_.out_emb; }
  RowMatrix& output_embedding() { return config_.tied ? params_.tok_emb : params_.out_emb; }

  /// Final hidden states, one row per position, T x head_width. In head-bias
  /// mode the last column is the constant 1.
  RowMatrix hidden(std::span<const TokenId> tokens) const;
  /// T x V next-token logits.
  RowMatrix logits(std::span<const TokenId> tokens) const;
  /// T x V next-token distributions (teacher forcing, one per input position).
  RowMatrix forward(std::span<const TokenId> tokens) const;

  /// Mean next-token cross-entropy over every (input, target) pair of the
  /// batch. Adds d loss / d theta into `grad` when non-null.
  double loss_and_grad(std::span<const TokenSeq> inputs, std::span<const TokenSeq> targets, Params* grad) const;

 private:
  void check_tokens(std::span<const TokenId> tokens) const;

  MicroConfig config_;
  Params params_;
};

/// Incremental decoding with a key/value cache. Agrees with Model::logits on
/// the same prefix.
class Decoder {
 public:
  explicit Decoder(const Model& model);
  /// Appends one token and returns the next-token logits (length V).
  Vector step(TokenId token);
  std::size_t length() const { return length_; }
  void reset() { length_ = 0; }

 private:
  const Model& model_;
  std::vector<RowMatrix> keys_, values_;  // per layer, context x d
  std::size_t length_ = 0;
};

// --- corpora -------------------------------------------------------------

/// Deterministic synthetic token stream. zipf_unigram draws iid tokens with
/// P(k) proportional to (k + 1)^-s; markov_bigram draws each successor from a
/// Zipf law over a per-source random permutation of the vocabulary.
SyntheticCorpus make_corpus(std::uint64_t vocab_size, std::uint64_t length, CorpusGenerator generator,
                            double zipf_exponent, std::uint64_t seed);

CorpusFreq count_tokens(const SyntheticCorpus& corpus);

/// Consecutive non-overlapping chunks of `length` tokens, at most `max_sequences`.
std::vector<TokenSeq> split_sequences(const TokenSeq& tokens, std::size_t length,
                                      std::size_t max_sequences = SIZE_MAX);

// --- training ------------------------------------------------------------

struct TrainOptions {
  std::uint64_t steps = 20000;
  std::uint64_t batch_size = 2;
  double lr = 3e-3;
  std::uint64_t warmup = 200;
  double final_lr_fraction = 0.1;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<std::uint64_t> checkpoint_steps{0};

  /// Learning rate applied on update number `step` (0-based).
  double lr_at(std::uint64_t step) const;
  /// Description stored in checkpoint metadata.
  std::string describe() const;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;  // requested steps plus the final one, ascending
  std::vector<double> losses;           // batch loss before update s, s = 0..steps-1 (or one entry when steps=0)
};

/// Trains from the initialization given by config.seed. Throws
/// DivergenceError on a non-finite loss, ConfigError on bad options.
TrainResult train(const MicroConfig& config, const SyntheticCorpus& corpus, const TrainOptions& options,
                  const std::function<void(std::uint64_t, double)>& progress = {});

/// round(final^(i / (count - 2))) for i = 0..count-2, prefixed with 0, deduplicated.
std::vector<std::uint64_t> log_spaced_steps(std::uint64_t final_step, std::size_t count);

// --- probability dumps ---------------------------------------------------

/// Sum of per-position distributions over every sequence. With
/// `exclude_last`, the final (unsupervised) position of each sequence is skipped.
ProbStats accumulate_probs(const Model& model, std::span<const TokenSeq> dataset, bool exclude_last = false);

/// Final hidden states of every position of every sequence, stacked.
RowMatrix collect_hidden(const Model& model, std::span<const TokenSeq> dataset, bool exclude_last = false);

/// Averaged distribution over cached hidden states for a given output
/// embedding: mean over rows of softmax(hidden * emb^T).
Vector head_average(const RowMatrix& hidden, const RowMatrix& out_emb);

/// Per-position next-token distributions over cached hidden states, for
/// exact re-evaluation after an edit to one row of the output embedding.
class HeadCache {
 public:
  HeadCache(RowMatrix hidden, const RowMatrix& out_emb);

  std::size_t positions() const { return static_cast<std::size_t>(probs_.rows()); }
  const RowMatrix& hidden() const { return hidden_; }
  /// Per-position distributions, positions x V.
  const RowMatrix& probs() const { return probs_; }
  /// Averaged distribution of the unedited head.
  const Vector& average() const { return base_; }
  /// Averaged distribution after adding `delta` to row `token`.
  Vector average_with_row_delta(TokenId token, const Vector& delta) const;

 private:
  RowMatrix hidden_;
  RowMatrix probs_;  // positions x V
  Vector base_;
};

// --- sampling ------------------------------------------------------------

struct GenerateOptions {
  double temperature = 1.0;
  bool greedy = false;  // temperature -> 0 limit, ignores the seed
  std::uint64_t seed = 0;
};

/// Samples `n_tokens` continuation tokens after `prefix` (prefix not included
/// in the result). Past the context window the oldest tokens are dropped.
TokenSeq generate(const Model& model, std::span<const TokenId> prefix, std::size_t n_tokens,
                  const GenerateOptions& options);

}  // namespace emprobe::lm
