// emprobe: command-line front end.
//
// Exit codes: 0 success, 1 runtime/data error, 2 configuration or usage
// error, 3 training divergence. Diagnostics are one line on stderr:
//   emprobe: error[<kind>]: <message>

#include <fnmatch.h>
#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "emprobe/dynamics.hpp"
#include "emprobe/error.hpp"
#include "emprobe/microlm.hpp"
#include "emprobe/probe.hpp"
#include "emprobe/prune.hpp"
#include "emprobe/report.hpp"
#include "emprobe/steer.hpp"
#include "emprobe/store.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace emprobe;

namespace {

// ---- manifests ----------------------------------------------------------------

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {}

  void config(const std::string& key, json value) { config_[key] = std::move(value); }
  void input(const fs::path& path) { inputs_.push_back({{"path", path.string()}, {"sha256", sha256_hex(store::read_file(path))}}); }

  /// Writes `bytes` atomically and records the file.
  void output(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    store::write_file_atomic(path, bytes);
    outputs_.push_back({{"path", path.string()}, {"sha256", sha256_hex(bytes)}});
  }
  void output_record(const fs::path& path, const store::Record& record) { output(path, store::encode(record)); }

  void write(const fs::path& path) const {
    json j;
    j["command"] = command_;
    j["config"] = config_;
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    j["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    store::write_file_atomic(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  json config_ = json::object();
  json inputs_ = json::array();
  json outputs_ = json::array();
  std::chrono::steady_clock::time_point start_;
};

// ---- shared helpers -------------------------------------------------------------

std::uint64_t seed_override(std::uint64_t seed) {
  if (const char* env = std::getenv("EMPROBE_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw ConfigError("EMPROBE_SEED must be an unsigned integer");
    return v;
  }
  return seed;
}

std::vector<TokenSeq> load_sequences(Manifest& m, const fs::path& path, std::size_t seq_len, std::size_t max_seqs,
                                     const std::string& what) {
  m.input(path);
  const auto corpus = store::read_as<SyntheticCorpus>(path);
  auto seqs = lm::split_sequences(corpus.tokens, seq_len, max_seqs);
  if (seqs.empty()) throw ConfigError(what + " set " + path.string() + " holds fewer than " + std::to_string(seq_len) + " tokens");
  return seqs;
}

void check_seq_len(std::size_t seq_len, const MicroConfig& c) {
  if (seq_len == 0 || seq_len > c.context) {
    throw ConfigError("--seq-len must lie in [1, " + std::to_string(c.context) + "] for this checkpoint");
  }
}

Checkpoint load_checkpoint(Manifest& m, const fs::path& path) {
  m.input(path);
  return store::read_as<Checkpoint>(path);
}

EncodingFit load_fit(Manifest& m, const fs::path& path) {
  m.input(path);
  const std::string bytes = store::read_file(path);
  if (bytes.rfind(store::kMagic, 0) == 0) return std::get<EncodingFit>(store::decode(bytes));
  try {
    return report::fit_from_json(json::parse(bytes));
  } catch (const json::exception& e) {
    throw StoreError("cannot read fit from " + path.string() + ": " + e.what());
  }
}

std::vector<double> parse_ratios(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad ratio '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("--ratios is empty");
  return out;
}

std::string step_name(std::uint64_t step) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "step_%08llu.ckpt", static_cast<unsigned long long>(step));
  return buf;
}

/// Expands shell-style patterns that the shell left unexpanded.
std::vector<fs::path> expand_paths(const std::vector<std::string>& items) {
  std::vector<fs::path> out;
  for (const auto& item : items) {
    if (item.find_first_of("*?[") == std::string::npos) {
      out.emplace_back(item);
      continue;
    }
    const fs::path pattern(item);
    const fs::path dir = pattern.has_parent_path() ? pattern.parent_path() : fs::path(".");
    std::vector<fs::path> hits;
    if (fs::is_directory(dir)) {
      for (const auto& e : fs::directory_iterator(dir)) {
        if (fnmatch(pattern.filename().c_str(), e.path().filename().c_str(), 0) == 0) hits.push_back(e.path());
      }
    }
    if (hits.empty()) throw ConfigError("pattern " + item + " matches no files");
    std::sort(hits.begin(), hits.end());
    out.insert(out.end(), hits.begin(), hits.end());
  }
  return out;
}

// ---- commands -------------------------------------------------------------------

struct CorpusArgs {
  std::string out, freq_out, generator = "zipf_unigram";
  std::uint64_t vocab = 256, length = 1000000, seed = 0;
  double zipf = 1.0;
};

CorpusGenerator parse_generator(const std::string& name) {
  if (name == "zipf_unigram") return CorpusGenerator::zipf_unigram;
  if (name == "markov_bigram") return CorpusGenerator::markov_bigram;
  throw ConfigError("unknown generator '" + name + "'");
}

void run_corpus(const CorpusArgs& a) {
  Manifest m("corpus");
  const std::uint64_t seed = seed_override(a.seed);
  m.config("vocab", a.vocab);
  m.config("length", a.length);
  m.config("generator", a.generator);
  m.config("zipf", a.zipf);
  m.config("seed", seed);
  const auto corpus = lm::make_corpus(a.vocab, a.length, parse_generator(a.generator), a.zipf, seed);
  m.output_record(a.out, corpus);
  if (!a.freq_out.empty()) m.output_record(a.freq_out, lm::count_tokens(corpus));
  m.write(a.out + ".manifest.json");
}

struct TrainArgs {
  std::string out_dir, corpus;
  MicroConfig config;
  lm::TrainOptions opts;
  std::size_t checkpoints = 12;
  std::vector<std::uint64_t> checkpoint_steps;
  std::uint64_t corpus_length = 1000000;
  double zipf = 1.0;
};

void run_train(TrainArgs a) {
  Manifest m("train");
  a.config.seed = seed_override(a.config.seed);
  a.config.validate();
  a.opts.checkpoint_steps =
      a.checkpoint_steps.empty() ? lm::log_spaced_steps(a.opts.steps, a.checkpoints) : a.checkpoint_steps;

  SyntheticCorpus corpus;
  if (a.corpus.empty()) {
    corpus = lm::make_corpus(a.config.vocab_size, std::max<std::uint64_t>(a.corpus_length, a.config.context + 1),
                             CorpusGenerator::zipf_unigram, a.zipf, a.config.seed);
    m.output_record(fs::path(a.out_dir) / "corpus.tokens", corpus);
  } else {
    m.input(a.corpus);
    corpus = store::read_as<SyntheticCorpus>(a.corpus);
  }

  const auto& c = a.config;
  m.config("vocab_size", c.vocab_size);
  m.config("d_model", c.d_model);
  m.config("n_layers", c.n_layers);
  m.config("n_heads", c.n_heads);
  m.config("d_ff", c.d_ff);
  m.config("context", c.context);
  m.config("tied", c.tied);
  m.config("head_bias", c.head_bias);
  m.config("seed", c.seed);
  m.config("optimizer", a.opts.describe());
  m.config("checkpoint_steps", a.opts.checkpoint_steps);

  const auto result = lm::train(a.config, corpus, a.opts);
  for (const auto& ck : result.checkpoints) m.output_record(fs::path(a.out_dir) / step_name(ck.step), ck);

  std::string losses = "step,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i)
    losses += std::to_string(i) + "," + report::format_real(result.losses[i]) + "\n";
  m.output(fs::path(a.out_dir) / "losses.csv", losses);
  m.write(fs::path(a.out_dir) / "manifest.json");
}

struct EvalArgs {
  std::string checkpoint, data, out, matrix_out, input_matrix_out;
  std::size_t seq_len = 64, max_seqs = std::numeric_limits<std::size_t>::max();
  bool exclude_last = false;
};

void run_eval(const EvalArgs& a) {
  Manifest m("eval");
  const Checkpoint ck = load_checkpoint(m, a.checkpoint);
  check_seq_len(a.seq_len, ck.config);
  const auto seqs = load_sequences(m, a.data, a.seq_len, a.max_seqs, "evaluation");
  m.config("seq_len", a.seq_len);
  m.config("sequences", seqs.size());
  m.config("exclude_last", a.exclude_last);
  const lm::Model model = lm::Model::from_checkpoint(ck);
  m.output_record(a.out, lm::accumulate_probs(model, seqs, a.exclude_last));
  if (!a.matrix_out.empty()) m.output_record(a.matrix_out, EmbeddingMatrix{model.output_embedding(), {}, ck.config.tied});
  if (!a.input_matrix_out.empty()) m.output_record(a.input_matrix_out, EmbeddingMatrix{model.params().tok_emb, {}, ck.config.tied});
  m.write(a.out + ".manifest.json");
}

struct FitArgs {
  std::string checkpoint, matrix, probstats, out_dir, embedding = "out";
  double floor = probe::kDefaultFloor;
  std::size_t random_draws = 10;
  std::uint64_t seed = 0;
};

void run_fit(const FitArgs& a) {
  Manifest m("fit");
  EmbeddingMatrix emb;
  if (!a.checkpoint.empty()) {
    const Checkpoint ck = load_checkpoint(m, a.checkpoint);
    if (a.embedding == "out") {
      emb = EmbeddingMatrix{ck.output_embedding(), {}, ck.config.tied};
    } else if (a.embedding == "in") {
      emb = EmbeddingMatrix{ck.param("tok_emb"), {}, ck.config.tied};
    } else {
      throw ConfigError("--embedding must be 'out' or 'in'");
    }
  } else {
    m.input(a.matrix);
    emb = store::read_as<EmbeddingMatrix>(a.matrix);
  }
  m.input(a.probstats);
  const Vector alpha = probe::finalize_avg_prob(store::read_as<ProbStats>(a.probstats));
  if (static_cast<std::size_t>(alpha.size()) != emb.rows()) {
    throw ConfigError("probability vocabulary (" + std::to_string(alpha.size()) + ") does not match embedding rows (" +
                      std::to_string(emb.rows()) + ")");
  }
  const std::uint64_t seed = seed_override(a.seed);
  m.config("floor", a.floor);
  m.config("embedding", a.embedding);
  m.config("random_draws", a.random_draws);
  m.config("seed", seed);

  const EncodingFit fit = probe::fit_encoding(alpha, emb, a.floor);
  json j = report::fit_json(fit);
  j["tokens"] = emb.rows();
  j["dims"] = emb.cols();
  j["tied"] = emb.tied;
  j["pca_centered"] = true;
  if (a.random_draws > 0) j["random_adj_r2"] = probe::random_baseline_adj_r2(emb, a.random_draws, seed, a.floor);

  const fs::path dir(a.out_dir);
  m.output(dir / "fit.json", j.dump(2) + "\n");
  m.output_record(dir / "fit.bin", fit);
  m.output(dir / "sparsity.csv", report::sparsity_csv(probe::sparsity_report(alpha, emb, fit, a.floor)));
  m.output(dir / "pca2d.csv", report::pca2d_csv(emb, alpha));
  m.write(dir / "manifest.json");
  std::printf("adj_r2=%s\n", report::format_real(fit.adj_r2).c_str());
}

struct SteerArgs {
  std::string checkpoint, matrix, fit, detect, test, ood, out_dir, b = "2", sig = "one_minus_p";
  std::uint32_t token = 0;
  double scale = 1.0, floor = probe::kDefaultFloor;
  std::size_t seq_len = 64, detect_size = std::numeric_limits<std::size_t>::max(),
              test_size = std::numeric_limits<std::size_t>::max();
};

void run_steer(const SteerArgs& a) {
  Manifest m("steer");
  const steer::Softness b = steer::parse_softness(a.b);
  const steer::SigTransform sig = steer::parse_sig_transform(a.sig);
  m.config("token", a.token);
  m.config("scale", a.scale);
  m.config("b", steer::softness_to_string(b));
  m.config("sig_transform", std::string(steer::to_string(sig)));
  const fs::path dir(a.out_dir);

  json out;
  out["token"] = a.token;
  out["scale"] = a.scale;
  out["b"] = steer::softness_to_string(b);
  out["sig_transform"] = std::string(steer::to_string(sig));

  if (a.checkpoint.empty()) {
    // exported matrix: plan and patch only, nothing to evaluate against
    if (a.fit.empty()) throw ConfigError("steering a bare matrix needs --fit");
    m.input(a.matrix);
    const auto emb = store::read_as<EmbeddingMatrix>(a.matrix);
    const EncodingFit fit = load_fit(m, a.fit);
    if (a.token >= emb.rows()) throw ConfigError("--token out of range");
    const auto plan = steer::build_plan(fit, a.token, a.scale, b, sig);
    m.output_record(dir / "steered.matrix", steer::apply_plan(emb, plan));
    for (const char* k : {"e_local", "e_id", "e_ood", "kl_retained", "measured_scale"}) out[k] = nullptr;
    out["delta"] = std::vector<double>(plan.delta.data(), plan.delta.data() + plan.delta.size());
    m.output(dir / "steer.json", out.dump(2) + "\n");
    m.write(dir / "manifest.json");
    return;
  }

  Checkpoint ck = load_checkpoint(m, a.checkpoint);
  check_seq_len(a.seq_len, ck.config);
  if (a.token >= ck.config.vocab_size) throw ConfigError("--token out of range");
  const lm::Model model = lm::Model::from_checkpoint(ck);
  const EmbeddingMatrix emb{model.output_embedding(), {}, ck.config.tied};

  std::vector<TokenSeq> detect;
  if (!a.detect.empty()) detect = load_sequences(m, a.detect, a.seq_len, a.detect_size, "detect");
  EncodingFit fit;
  if (!a.fit.empty()) {
    fit = load_fit(m, a.fit);
  } else {
    if (detect.empty()) throw ConfigError("steer needs --fit or --detect");
    fit = probe::fit_encoding(probe::finalize_avg_prob(lm::accumulate_probs(model, detect)), emb, a.floor);
  }
  m.config("detect_sequences", detect.size());
  const auto plan = steer::build_plan(fit, a.token, a.scale, b, sig);
  lm::Model edited = model;
  steer::apply_plan_inplace(edited.output_embedding(), plan);

  auto evaluate = [&](const std::vector<TokenSeq>& set) {
    return steer::evaluate_steering(lm::accumulate_probs(model, set), lm::accumulate_probs(edited, set), a.token,
                                    a.scale, a.floor);
  };
  std::optional<steer::SteerEval> local, id, ood;
  if (!detect.empty()) local = evaluate(detect);
  if (!a.test.empty()) id = evaluate(load_sequences(m, a.test, a.seq_len, a.test_size, "test"));
  if (!a.ood.empty()) ood = evaluate(load_sequences(m, a.ood, a.seq_len, a.test_size, "out-of-domain"));

  const steer::SteerEval* primary = id ? &*id : (local ? &*local : nullptr);
  out["e_local"] = local ? json(local->scale_error) : json(nullptr);
  out["e_id"] = id ? json(id->scale_error) : json(nullptr);
  out["e_ood"] = ood ? json(ood->scale_error) : json(nullptr);
  out["kl_retained"] = primary ? json(primary->kl_retained) : json(nullptr);
  out["measured_scale"] = primary ? json(primary->measured_scale) : json(nullptr);
  out["fit_adj_r2"] = fit.adj_r2;
  out["delta"] = std::vector<double>(plan.delta.data(), plan.delta.data() + plan.delta.size());

  Checkpoint patched = edited.to_checkpoint(ck.step, ck.rng_state,
                                            ck.metadata + "; steered token=" + std::to_string(a.token) +
                                                " scale=" + report::format_real(a.scale));
  m.output_record(dir / "steered.ckpt", patched);
  m.output(dir / "steer.json", out.dump(2) + "\n");
  m.write(dir / "manifest.json");
}

struct PruneArgs {
  std::string checkpoint, fit, detect, eval, out, order = "ascending", ratios = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
  std::size_t seq_len = 64, max_seqs = std::numeric_limits<std::size_t>::max();
  std::size_t gen_count = 512, gen_length = 64, gen_prefix = 2;
  bool no_generation = false;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

void run_prune(const PruneArgs& a) {
  Manifest m("prune");
  const Checkpoint ck = load_checkpoint(m, a.checkpoint);
  check_seq_len(a.seq_len, ck.config);
  const lm::Model model = lm::Model::from_checkpoint(ck);
  const prune::Order order = prune::parse_order(a.order);
  const auto ratios = parse_ratios(a.ratios);
  const std::uint64_t seed = seed_override(a.seed);

  const auto eval_set = load_sequences(m, a.eval, a.seq_len, a.max_seqs, "evaluation");
  EncodingFit fit;
  if (!a.fit.empty()) {
    fit = load_fit(m, a.fit);
  } else {
    const auto detect = a.detect.empty() ? eval_set : load_sequences(m, a.detect, a.seq_len, a.max_seqs, "detect");
    fit = probe::fit_encoding(probe::finalize_avg_prob(lm::accumulate_probs(model, detect)),
                              EmbeddingMatrix{model.output_embedding(), {}, ck.config.tied});
  }

  std::optional<prune::GenerationSettings> gen;
  if (!a.no_generation) {
    gen = prune::GenerationSettings{a.gen_count, a.gen_length, a.gen_prefix, a.temperature, seed};
  }
  m.config("order", a.order);
  m.config("ratios", ratios);
  m.config("seed", seed);
  m.config("generation", !a.no_generation);
  m.config("gen_count", a.gen_count);
  m.config("gen_length", a.gen_length);

  const prune::MicroPruneContext ctx(model, eval_set, gen);
  const auto sweep = prune::prune_sweep(fit, ratios, order, ctx, seed);
  m.output(a.out, prune::sweep_csv({sweep}));
  m.write(a.out + ".manifest.json");
}

struct DynamicsArgs {
  std::vector<std::string> checkpoints, groups;
  std::string corpus, out;
  double floor = probe::kDefaultFloor;
};

void run_dynamics(const DynamicsArgs& a) {
  Manifest m("dynamics");
  std::vector<Checkpoint> cks;
  for (const auto& p : expand_paths(a.checkpoints)) cks.push_back(load_checkpoint(m, p));

  m.input(a.corpus);
  const store::Record rec = store::read_record(a.corpus);
  CorpusFreq freq;
  if (const auto* c = std::get_if<SyntheticCorpus>(&rec)) {
    freq = lm::count_tokens(*c);
  } else if (const auto* f = std::get_if<CorpusFreq>(&rec)) {
    freq = *f;
  } else {
    throw ConfigError("--corpus must be a tokens or corpusfreq record");
  }
  m.config("groups", a.groups);
  m.config("floor", a.floor);
  const auto tr = dynamics::trace(std::move(cks), freq, a.groups, a.floor);
  m.output(a.out, dynamics::trace_csv(tr));
  m.write(a.out + ".manifest.json");
}

// ---- argument wiring ----------------------------------------------------------------

/// Reads key=value lines (# comments allowed) as --key=value arguments.
std::vector<std::string> config_file_args(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::vector<std::string> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    key.erase(key.find_last_not_of(" \t") + 1);
    value.erase(0, value.find_first_not_of(" \t"));
    std::replace(key.begin(), key.end(), '_', '-');
    out.push_back("--" + key + "=" + value);
  }
  return out;
}

/// Splices `train --config FILE` contents in front of the explicit flags so
/// that flags given on the command line win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  if (args.empty() || args[0] != "train") return args;
  for (std::size_t i = 1; i < args.size(); ++i) {
    std::string file;
    std::size_t span = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      file = args[i + 1];
      span = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
      span = 1;
    } else {
      continue;
    }
    const auto extra = config_file_args(file);
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + span));
    args.insert(args.begin() + 1, extra.begin(), extra.end());
    break;
  }
  return args;
}

void fail(const char* kind, const std::string& message) {
  std::string one_line = message;
  std::replace(one_line.begin(), one_line.end(), '\n', ' ');
  std::fprintf(stderr, "emprobe: error[%s]: %s\n", kind, one_line.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probe, steer and prune the log-linear probability encoding of an output embedding."};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  CorpusArgs corpus;
  auto* c = app.add_subcommand("corpus", "Generate a synthetic token corpus.");
  c->add_option("--out", corpus.out, "Output tokens record")->required();
  c->add_option("--freq-out", corpus.freq_out, "Also write the corpusfreq record here");
  c->add_option("--vocab", corpus.vocab, "Vocabulary size")->capture_default_str();
  c->add_option("--length", corpus.length, "Number of tokens")->capture_default_str();
  c->add_option("--generator", corpus.generator, "zipf_unigram or markov_bigram")->capture_default_str();
  c->add_option("--zipf", corpus.zipf, "Zipf exponent")->capture_default_str();
  c->add_option("--seed", corpus.seed, "Seed (EMPROBE_SEED overrides)")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the micro-LM and write checkpoints.");
  t->add_option("--out-dir", train.out_dir, "Directory for checkpoints and manifest")->required();
  t->add_option("--config", "Plain-text key=value file with any of the flags below");
  t->add_option("--corpus", train.corpus, "Tokens record (default: generate a Zipf corpus)");
  t->add_option("--corpus-length", train.corpus_length, "Length of the generated corpus")->capture_default_str();
  t->add_option("--zipf", train.zipf, "Zipf exponent of the generated corpus")->capture_default_str();
  t->add_option("--vocab", train.config.vocab_size, "Vocabulary size")->capture_default_str();
  t->add_option("--d-model", train.config.d_model, "Hidden width")->capture_default_str();
  t->add_option("--layers", train.config.n_layers, "Transformer layers")->capture_default_str();
  t->add_option("--heads", train.config.n_heads, "Attention heads")->capture_default_str();
  t->add_option("--d-ff", train.config.d_ff, "Feed-forward width")->capture_default_str();
  t->add_option("--context", train.config.context, "Context length")->capture_default_str();
  t->add_flag("--tied", train.config.tied, "Tie input and output embeddings");
  t->add_flag("--head-bias", train.config.head_bias, "Append a constant-one hidden dimension");
  t->add_option("--seed", train.config.seed, "Model seed (EMPROBE_SEED overrides)")->capture_default_str();
  t->add_option("--steps", train.opts.steps, "Optimizer updates")->capture_default_str();
  t->add_option("--batch-size", train.opts.batch_size, "Sequences per update")->capture_default_str();
  t->add_option("--lr", train.opts.lr, "Peak learning rate")->capture_default_str();
  t->add_option("--warmup", train.opts.warmup, "Linear warmup updates")->capture_default_str();
  t->add_option("--final-lr-fraction", train.opts.final_lr_fraction, "Learning rate at the end, relative to peak")
      ->capture_default_str();
  t->add_option("--checkpoints", train.checkpoints, "Number of log-spaced checkpoints")->capture_default_str();
  t->add_option("--checkpoint-steps", train.checkpoint_steps, "Explicit checkpoint steps (overrides --checkpoints)")
      ->delimiter(',');

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Accumulate averaged output probabilities over a token set.");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint record")->required();
  e->add_option("--data", eval.data, "Tokens record")->required();
  e->add_option("--out", eval.out, "Output probstats record")->required();
  e->add_option("--matrix-out", eval.matrix_out, "Also export the output embedding");
  e->add_option("--input-matrix-out", eval.input_matrix_out, "Also export the input embedding");
  e->add_option("--seq-len", eval.seq_len, "Sequence length")->capture_default_str();
  e->add_option("--max-seqs", eval.max_seqs, "Maximum number of sequences");
  e->add_flag("--exclude-last", eval.exclude_last, "Skip the final position of each sequence");

  FitArgs fit;
  auto* f = app.add_subcommand("fit", "Fit -log alpha against the embedding and report sparsity.");
  auto* f_ck = f->add_option("--checkpoint", fit.checkpoint, "Checkpoint record");
  auto* f_mx = f->add_option("--matrix", fit.matrix, "Embedding matrix record");
  f_ck->excludes(f_mx);
  f->add_option("--probstats", fit.probstats, "Probstats record")->required();
  f->add_option("--out-dir", fit.out_dir, "Directory for fit.json, fit.bin and CSVs")->required();
  f->add_option("--embedding", fit.embedding, "out or in (checkpoints only)")->capture_default_str();
  f->add_option("--floor", fit.floor, "Probability floor before the log")->capture_default_str();
  f->add_option("--random-draws", fit.random_draws, "Draws for the random-target baseline (0 disables)")
      ->capture_default_str();
  f->add_option("--seed", fit.seed, "Seed for the random baseline")->capture_default_str();

  SteerArgs st;
  auto* s = app.add_subcommand("steer", "Scale one token's averaged probability by editing its output row.");
  auto* s_ck = s->add_option("--checkpoint", st.checkpoint, "Checkpoint record");
  auto* s_mx = s->add_option("--matrix", st.matrix, "Embedding matrix record (plan and patch only)");
  s_ck->excludes(s_mx);
  s->add_option("--token", st.token, "Token id")->required();
  s->add_option("--scale", st.scale, "Expected probability scale r")->required();
  s->add_option("--b", st.b, "Softness: number, inf or -inf")->capture_default_str();
  s->add_option("--sig-transform", st.sig, "one_minus_p, neg_log_p or raw_p")->capture_default_str();
  s->add_option("--fit", st.fit, "Precomputed fit (fit.bin or fit.json)");
  s->add_option("--detect", st.detect, "Detect tokens record");
  s->add_option("--detect-size", st.detect_size, "Number of detect sequences");
  s->add_option("--test", st.test, "In-domain test tokens record");
  s->add_option("--ood", st.ood, "Out-of-domain tokens record");
  s->add_option("--test-size", st.test_size, "Maximum test sequences");
  s->add_option("--seq-len", st.seq_len, "Sequence length")->capture_default_str();
  s->add_option("--floor", st.floor, "Probability floor")->capture_default_str();
  s->add_option("--out-dir", st.out_dir, "Directory for the patch and steer.json")->required();

  PruneArgs pr;
  auto* p = app.add_subcommand("prune", "Remove output-embedding dimensions by slope saliency.");
  p->add_option("--checkpoint", pr.checkpoint, "Checkpoint record")->required();
  p->add_option("--eval", pr.eval, "Evaluation tokens record")->required();
  p->add_option("--fit", pr.fit, "Precomputed fit (default: fit on --detect or --eval)");
  p->add_option("--detect", pr.detect, "Detect tokens record for the fit");
  p->add_option("--ratios", pr.ratios, "Comma-separated removal ratios")->capture_default_str();
  p->add_option("--order", pr.order, "ascending, descending or random")->capture_default_str();
  p->add_option("--seed", pr.seed, "Seed for random order and generation")->capture_default_str();
  p->add_option("--seq-len", pr.seq_len, "Sequence length")->capture_default_str();
  p->add_option("--max-seqs", pr.max_seqs, "Maximum evaluation sequences");
  p->add_option("--gen-count", pr.gen_count, "Generations per model")->capture_default_str();
  p->add_option("--gen-length", pr.gen_length, "Tokens per generation")->capture_default_str();
  p->add_option("--gen-prefix", pr.gen_prefix, "Prefix tokens taken from the evaluation set")->capture_default_str();
  p->add_option("--temperature", pr.temperature, "Sampling temperature")->capture_default_str();
  p->add_flag("--no-generation", pr.no_generation, "Skip the generation-similarity proxy");
  p->add_option("--out", pr.out, "Output CSV")->required();

  DynamicsArgs dy;
  auto* d = app.add_subcommand("dynamics", "Trace frequency encoding and convergence over checkpoints.");
  d->add_option("--checkpoints", dy.checkpoints, "Checkpoint files or patterns")->required()->multi_option_policy(
      CLI::MultiOptionPolicy::TakeAll);
  d->add_option("--corpus", dy.corpus, "Tokens or corpusfreq record")->required();
  d->add_option("--groups", dy.groups, "Parameter groups (default: embeddings and attention q/k/v)")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  d->add_option("--floor", dy.floor, "Frequency floor before the log")->capture_default_str();
  d->add_option("--out", dy.out, "Output CSV")->required();

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", e.what());
    return 2;
  } catch (const ConfigError& e) {
    fail("config", e.what());
    return 2;
  }

  try {
    if (c->parsed()) run_corpus(corpus);
    if (t->parsed()) run_train(train);
    if (e->parsed()) run_eval(eval);
    if (f->parsed()) {
      if (fit.checkpoint.empty() == fit.matrix.empty()) throw ConfigError("fit needs exactly one of --checkpoint, --matrix");
      run_fit(fit);
    }
    if (s->parsed()) {
      if (st.checkpoint.empty() == st.matrix.empty()) throw ConfigError("steer needs exactly one of --checkpoint, --matrix");
      run_steer(st);
    }
    if (p->parsed()) run_prune(pr);
    if (d->parsed()) run_dynamics(dy);
  } catch (const ConfigError& ex) {
    fail("config", ex.what());
    return 2;
  } catch (const DivergenceError& ex) {
    fail("divergence", ex.what());
    return 3;
  } catch (const StoreError& ex) {
    fail("store", ex.what());
    return 1;
  } catch (const InvariantError& ex) {
    fail("invariant", ex.what());
    return 1;
  } catch (const std::exception& ex) {
    fail("runtime", ex.what());
    return 1;
  }
  return 0;
}
