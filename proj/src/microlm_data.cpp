#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <sstream>

#include "emprobe/error.hpp"
#include "emprobe/microlm.hpp"

namespace emprobe::lm {

namespace {

using Index = Eigen::Index;

std::vector<double> zipf_cdf(std::uint64_t n, double exponent) {
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (std::uint64_t k = 0; k < n; ++k) {
    acc += std::pow(static_cast<double>(k + 1), -exponent);
    cdf[k] = acc;
  }
  for (auto& c : cdf) c /= acc;
  cdf.back() = 1.0;
  return cdf;
}

std::uint64_t draw(const std::vector<double>& cdf, double u) {
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return static_cast<std::uint64_t>(std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(cdf.size()) - 1));
}

}  // namespace

SyntheticCorpus make_corpus(std::uint64_t vocab_size, std::uint64_t length, CorpusGenerator generator,
                            double zipf_exponent, std::uint64_t seed) {
  if (vocab_size < 2) throw ConfigError("corpus vocab size must be >= 2");
  if (!(zipf_exponent >= 0.0) || !std::isfinite(zipf_exponent)) throw ConfigError("zipf exponent must be >= 0");
  SyntheticCorpus corpus;
  corpus.vocab_size = vocab_size;
  corpus.zipf_exponent = zipf_exponent;
  corpus.seed = seed;
  corpus.generator = generator;
  corpus.tokens.resize(length);

  Rng rng(seed);
  const std::vector<double> cdf = zipf_cdf(vocab_size, zipf_exponent);
  if (generator == CorpusGenerator::zipf_unigram) {
    for (auto& t : corpus.tokens) t = static_cast<TokenId>(draw(cdf, rng.uniform()));
    return corpus;
  }

  // Successor ranks are permuted per source token (Fisher-Yates).
  std::vector<std::vector<TokenId>> successor(vocab_size, std::vector<TokenId>(vocab_size));
  for (auto& perm : successor) {
    std::iota(perm.begin(), perm.end(), TokenId{0});
    for (std::uint64_t i = vocab_size - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  }
  TokenId prev = static_cast<TokenId>(draw(cdf, rng.uniform()));
  for (std::uint64_t i = 0; i < length; ++i) {
    if (i > 0) prev = successor[prev][draw(cdf, rng.uniform())];
    corpus.tokens[i] = prev;
  }
  return corpus;
}

CorpusFreq count_tokens(const SyntheticCorpus& corpus) {
  CorpusFreq f;
  f.counts.assign(corpus.vocab_size, 0);
  for (TokenId t : corpus.tokens) {
    if (t >= corpus.vocab_size) throw InvariantError("corpus token out of range");
    ++f.counts[t];
  }
  f.total = corpus.tokens.size();
  return f;
}

std::vector<TokenSeq> split_sequences(const TokenSeq& tokens, std::size_t length, std::size_t max_sequences) {
  if (length == 0) throw InvariantError("sequence length must be >= 1");
  std::vector<TokenSeq> out;
  for (std::size_t start = 0; start + length <= tokens.size() && out.size() < max_sequences; start += length) {
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                     tokens.begin() + static_cast<std::ptrdiff_t>(start + length));
  }
  return out;
}

// --- training --------------------------------------------------------------

double TrainOptions::lr_at(std::uint64_t step) const {
  if (step < warmup) return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::uint64_t>(1, steps - std::min(steps, warmup)));
  const double frac = std::min(1.0, static_cast<double>(step - warmup) / span);
  return lr * (1.0 - (1.0 - final_lr_fraction) * frac);
}

std::string TrainOptions::describe() const {
  std::ostringstream out;
  out.precision(17);
  out << "optimizer=rms_adaptive(no momentum) beta2=" << beta2 << " eps=" << eps << " lr=" << lr
      << " warmup=" << warmup << " schedule=linear_warmup_then_linear_decay final_lr_fraction=" << final_lr_fraction
      << " batch_size=" << batch_size << " steps=" << steps;
  return out.str();
}

std::vector<std::uint64_t> log_spaced_steps(std::uint64_t final_step, std::size_t count) {
  std::vector<std::uint64_t> out{0};
  if (final_step == 0 || count < 2) return out;
  const std::size_t n = count - 1;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = n == 1 ? 1.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    const auto s = static_cast<std::uint64_t>(std::llround(std::pow(static_cast<double>(final_step), e)));
    if (s > out.back()) out.push_back(s);
  }
  if (out.back() != final_step) out.push_back(final_step);
  return out;
}

TrainResult train(const MicroConfig& config, const SyntheticCorpus& corpus, const TrainOptions& options,
                  const std::function<void(std::uint64_t, double)>& progress) {
  config.validate();
  if (corpus.vocab_size != config.vocab_size) throw ConfigError("corpus vocabulary differs from model vocabulary");
  if (options.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(options.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  const auto& wanted = options.checkpoint_steps;
  if (!std::is_sorted(wanted.begin(), wanted.end())) throw ConfigError("checkpoint steps must be sorted");
  if (!wanted.empty() && wanted.back() > options.steps) throw ConfigError("checkpoint step beyond the final step");
  if (options.steps > 0 && corpus.tokens.size() < config.context + 1) {
    throw ConfigError("corpus shorter than one training window");
  }

  Model model(config);
  Params second_moment = Params::zeros(config);
  Params grad = Params::zeros(config);
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::string meta = options.describe();

  TrainResult result;
  auto wants = [&](std::uint64_t step) {
    return step == 0 || step == options.steps || std::binary_search(wanted.begin(), wanted.end(), step);
  };
  result.checkpoints.push_back(model.to_checkpoint(0, rng.state(), meta));

  std::vector<double*> theta, g, v;
  std::vector<Index> sizes;
  model.params().for_each([&](const std::string&, RowMatrix& m) {
    theta.push_back(m.data());
    sizes.push_back(m.size());
  });
  grad.for_each([&](const std::string&, RowMatrix& m) { g.push_back(m.data()); });
  second_moment.for_each([&](const std::string&, RowMatrix& m) { v.push_back(m.data()); });

  const std::size_t window = config.context;
  const std::uint64_t starts = corpus.tokens.size() - window;  // valid when steps > 0
  std::vector<TokenSeq> inputs(options.batch_size), targets(options.batch_size);
  double beta2_pow = 1.0;

  for (std::uint64_t step = 0; step < options.steps; ++step) {
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      const auto start = static_cast<std::ptrdiff_t>(rng.below(starts));
      const auto first = corpus.tokens.begin() + start;
      inputs[b].assign(first, first + static_cast<std::ptrdiff_t>(window));
      targets[b].assign(first + 1, first + 1 + static_cast<std::ptrdiff_t>(window));
    }
    grad.for_each([](const std::string&, RowMatrix& m) { m.setZero(); });
    const double loss = model.loss_and_grad(inputs, targets, &grad);
    if (!std::isfinite(loss)) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")");
    }
    result.losses.push_back(loss);
    if (progress) progress(step, loss);

    beta2_pow *= options.beta2;
    const double lr = options.lr_at(step);
    const double correction = 1.0 - beta2_pow;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      double* th = theta[k];
      const double* gk = g[k];
      double* vk = v[k];
      for (Index i = 0; i < sizes[k]; ++i) {
        vk[i] = options.beta2 * vk[i] + (1.0 - options.beta2) * gk[i] * gk[i];
        th[i] -= lr * gk[i] / (std::sqrt(vk[i] / correction) + options.eps);
      }
    }
    if (wants(step + 1)) result.checkpoints.push_back(model.to_checkpoint(step + 1, rng.state(), meta));
  }
  return result;
}

// --- probability dumps -----------------------------------------------------

ProbStats accumulate_probs(const Model& model, std::span<const TokenSeq> dataset, bool exclude_last) {
  ProbStats stats(model.config().vocab_size);
  for (const auto& seq : dataset) {
    const RowMatrix p = model.forward(seq);
    const Index rows = exclude_last ? p.rows() - 1 : p.rows();
    if (rows <= 0) continue;
    stats.sum += p.topRows(rows).colwise().sum().transpose();
    stats.positions += static_cast<std::uint64_t>(rows);
  }
  return stats;
}

RowMatrix collect_hidden(const Model& model, std::span<const TokenSeq> dataset, bool exclude_last) {
  std::vector<RowMatrix> parts;
  Index total = 0;
  for (const auto& seq : dataset) {
    RowMatrix h = model.hidden(seq);
    if (exclude_last) h.conservativeResize(h.rows() - 1, Eigen::NoChange);
    total += h.rows();
    parts.push_back(std::move(h));
  }
  RowMatrix out(total, static_cast<Index>(model.config().head_width()));
  Index row = 0;
  for (const auto& h : parts) {
    out.middleRows(row, h.rows()) = h;
    row += h.rows();
  }
  return out;
}

Vector head_average(const RowMatrix& hidden, const RowMatrix& out_emb) {
  if (hidden.cols() != out_emb.cols()) throw InvariantError("hidden width does not match output embedding");
  if (hidden.rows() == 0) throw InvariantError("no hidden states to average");
  constexpr Index kBlock = 2048;
  Vector sum = Vector::Zero(out_emb.rows());
  for (Index start = 0; start < hidden.rows(); start += kBlock) {
    const Index n = std::min(kBlock, hidden.rows() - start);
    RowMatrix z = hidden.middleRows(start, n) * out_emb.transpose();
    for (Index i = 0; i < n; ++i) {
      const double mx = z.row(i).maxCoeff();
      z.row(i) = (z.row(i).array() - mx).exp();
      z.row(i) /= z.row(i).sum();
    }
    sum += z.colwise().sum().transpose();
  }
  return sum / static_cast<double>(hidden.rows());
}

HeadCache::HeadCache(RowMatrix hidden, const RowMatrix& out_emb) : hidden_(std::move(hidden)) {
  if (hidden_.cols() != out_emb.cols()) throw InvariantError("hidden width does not match output embedding");
  if (hidden_.rows() == 0) throw InvariantError("no hidden states to cache");
  probs_ = hidden_ * out_emb.transpose();
  for (Index i = 0; i < probs_.rows(); ++i) {
    const double mx = probs_.row(i).maxCoeff();
    probs_.row(i) = (probs_.row(i).array() - mx).exp();
    probs_.row(i) /= probs_.row(i).sum();
  }
  base_ = probs_.colwise().mean().transpose();
}

Vector HeadCache::average_with_row_delta(TokenId token, const Vector& delta) const {
  if (token >= probs_.cols()) throw InvariantError("token out of range");
  if (delta.size() != hidden_.cols()) throw InvariantError("delta width does not match hidden states");
  const Vector shift = hidden_ * delta;
  // Only logit `token` moves by shift_i, so every other probability at that
  // position is rescaled by 1 / (1 - p + p e^shift). Evaluated in log space.
  Vector others(probs_.rows());
  Vector edited(probs_.rows());
  for (Index i = 0; i < probs_.rows(); ++i) {
    const double p = probs_(i, token);
    const double a = std::log1p(-p);
    const double b = std::log(p) + shift[i];
    const double m = std::max(a, b);
    const double log_norm = m + std::log(std::exp(a - m) + std::exp(b - m));
    others[i] = std::exp(-log_norm);
    edited[i] = std::exp(b - log_norm);
  }
  Vector avg = (others.transpose() * probs_).transpose() / static_cast<double>(probs_.rows());
  avg[token] = edited.mean();
  return avg;
}

// --- sampling --------------------------------------------------------------

namespace {

TokenId pick(const Vector& logits, const GenerateOptions& options, Rng& rng) {
  if (options.greedy) {
    Index arg = 0;
    logits.maxCoeff(&arg);
    return static_cast<TokenId>(arg);
  }
  Vector p = ((logits.array() - logits.maxCoeff()) / options.temperature).exp();
  const double u = rng.uniform() * p.sum();
  double acc = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  // rounding left u at the very top: take the last token with nonzero mass
  for (Index i = p.size(); i-- > 0;) {
    if (p[i] > 0.0) return static_cast<TokenId>(i);
  }
  return 0;
}

}  // namespace

TokenSeq generate(const Model& model, std::span<const TokenId> prefix, std::size_t n_tokens,
                  const GenerateOptions& options) {
  if (prefix.empty()) throw InvariantError("generation needs a nonempty prefix");
  if (!options.greedy && !(options.temperature > 0.0)) throw InvariantError("temperature must be > 0");
  const std::size_t context = model.config().context;
  Rng rng(options.seed);
  Decoder decoder(model);
  std::vector<TokenId> history(prefix.begin(), prefix.end());

  auto refill = [&]() {
    decoder.reset();
    const std::size_t from = history.size() > context ? history.size() - context : 0;
    Vector logits;
    for (std::size_t i = from; i < history.size(); ++i) logits = decoder.step(history[i]);
    return logits;
  };

  Vector logits = refill();
  TokenSeq out;
  out.reserve(n_tokens);
  for (std::size_t i = 0; i < n_tokens; ++i) {
    const TokenId next = pick(logits, options, rng);
    out.push_back(next);
    history.push_back(next);
    if (i + 1 == n_tokens) break;
    logits = decoder.length() < context ? decoder.step(next) : refill();
  }
  return out;
}

}  // namespace emprobe::lm
