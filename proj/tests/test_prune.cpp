#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "emprobe/error.hpp"
#include "emprobe/microlm.hpp"
#include "emprobe/probe.hpp"
#include "emprobe/prune.hpp"
#include "test_util.hpp"

using namespace emprobe;
using emprobe::testing::random_matrix;
using emprobe::testing::random_vector;

namespace {

EncodingFit fit_with(const Vector& direction) {
  EncodingFit f;
  f.direction = direction;
  f.p_values = Vector::Zero(direction.size());
  return f;
}

MicroConfig small_config(bool tied) {
  MicroConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.context = 8;
  c.tied = tied;
  c.seed = 6;
  return c;
}

lm::Model trained_small(bool tied) {
  const auto corpus = lm::make_corpus(32, 20000, CorpusGenerator::zipf_unigram, 1.0, 2);
  lm::TrainOptions opts;
  opts.steps = 200;
  opts.batch_size = 4;
  opts.lr = 1e-2;
  opts.warmup = 10;
  opts.checkpoint_steps = {};
  return lm::Model::from_checkpoint(lm::train(small_config(tied), corpus, opts).checkpoints.back());
}

std::vector<TokenSeq> eval_set() {
  const auto held = lm::make_corpus(32, 8 * 40, CorpusGenerator::zipf_unigram, 1.0, 3);
  return lm::split_sequences(held.tokens, 8, 40);
}

}  // namespace

TEST_CASE("ranking by slope magnitude") {
  CHECK(prune::rank_dimensions(fit_with((Vector(3) << 3, -1, 2).finished())) == std::vector<std::size_t>{1, 2, 0});
  CHECK(prune::rank_dimensions(fit_with(Vector::Constant(4, -2.0))) == std::vector<std::size_t>{0, 1, 2, 3});

  Rng rng(1);
  const Vector d = random_vector(100, rng);
  std::vector<std::pair<double, std::size_t>> oracle;
  for (std::size_t j = 0; j < 100; ++j) oracle.emplace_back(std::abs(d[static_cast<Eigen::Index>(j)]), j);
  std::sort(oracle.begin(), oracle.end());
  std::vector<std::size_t> want;
  for (const auto& [mag, j] : oracle) want.push_back(j);
  CHECK(prune::rank_dimensions(fit_with(d)) == want);

  // positive rescaling leaves the order unchanged
  CHECK(prune::rank_dimensions(fit_with(7.5 * d)) == want);
}

TEST_CASE("removal orders") {
  const EncodingFit f = fit_with((Vector(5) << 0.5, -4, 1, 1, 3).finished());
  CHECK(prune::removal_order(f, prune::Order::ascending) == std::vector<std::size_t>{0, 2, 3, 4, 1});
  CHECK(prune::removal_order(f, prune::Order::descending) == std::vector<std::size_t>{1, 4, 2, 3, 0});
  auto r = prune::removal_order(f, prune::Order::random, 9);
  CHECK(r == prune::removal_order(f, prune::Order::random, 9));
  std::sort(r.begin(), r.end());
  CHECK(r == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(prune::parse_order("descending") == prune::Order::descending);
  CHECK_THROWS_AS(prune::parse_order("up"), ConfigError);
}

TEST_CASE("zeroing dimensions") {
  Rng rng(2);
  const EmbeddingMatrix emb{random_matrix(6, 4, rng), {}, false};
  CHECK(prune::zero_dimensions(emb, {}).data == emb.data);
  CHECK(prune::zero_dimensions(emb, {0, 1, 2, 3}).data.cwiseAbs().maxCoeff() == 0.0);

  const EmbeddingMatrix eye{RowMatrix::Identity(3, 3), {}, false};
  const auto z = prune::zero_dimensions(eye, {2});
  CHECK(z.data.col(2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(z.data.leftCols(2) == eye.data.leftCols(2));

  // idempotent on subsets
  const auto once = prune::zero_dimensions(emb, {1, 3});
  CHECK(prune::zero_dimensions(once, {3}).data == once.data);
  CHECK_THROWS_AS(prune::zero_dimensions(emb, {4}), InvariantError);

  const auto compact = prune::compact_dimensions(emb, {1, 3});
  REQUIRE(compact.cols() == 2);
  CHECK(compact.data.col(0) == emb.data.col(0));
  CHECK(compact.data.col(1) == emb.data.col(2));
  // zeroed and compacted heads produce the same logits
  const Vector h = random_vector(4, rng);
  const Vector hk = (Vector(2) << h[0], h[2]).finished();
  CHECK((once.data * h - compact.data * hk).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("generation similarity") {
  const std::vector<TokenSeq> a{{1, 2, 3, 4}, {2, 3, 4, 5}};
  const std::vector<TokenSeq> b{{9, 8, 7, 6}};
  CHECK(prune::generation_similarity(a, a) == 1.0);
  CHECK(prune::generation_similarity(a, b) == doctest::Approx(0.0).epsilon(1e-15));
  const std::vector<TokenSeq> c{{1, 2, 3, 9}};
  CHECK(prune::generation_similarity(a, c) == doctest::Approx(prune::generation_similarity(c, a)).epsilon(1e-15));

  // half the mass shared: p = [1/2, 1/2], q = [1/2, 0, 1/2] over three bigrams
  const std::vector<TokenSeq> p{{1, 2}, {3, 4}}, q{{1, 2}, {5, 6}};
  const double js = 0.5 * (0.5 * std::log2(1.0)) * 2 + 0.5 * 0.5 * std::log2(2.0) * 2;
  CHECK(prune::generation_similarity(p, q) == doctest::Approx(1.0 - js).epsilon(1e-12));
  CHECK_THROWS_AS(prune::generation_similarity({{1}}, {{1}}), InvariantError);
}

TEST_CASE("KL divergence") {
  const Vector p = (Vector(3) << 0.2, 0.3, 0.5).finished();
  CHECK(prune::kl_divergence(p, p) == 0.0);
  const Vector q = Vector::Constant(3, 1.0 / 3);
  double want = 0;
  for (int i = 0; i < 3; ++i) want += p[i] * std::log(p[i] * 3);
  CHECK(prune::kl_divergence(p, q) == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("pruning sweep on a micro-LM") {
  const lm::Model model = trained_small(false);
  prune::GenerationSettings gen;
  gen.count = 16;
  gen.length = 12;
  gen.seed = 4;
  const prune::MicroPruneContext ctx(model, eval_set(), gen);

  const EmbeddingMatrix emb{model.output_embedding(), {}, false};
  const Vector alpha = ctx.averaged_distribution({});
  const EncodingFit fit = probe::fit_encoding(alpha, emb);

  const auto sweep = prune::prune_sweep(fit, {1.0, 0.0, 0.5, 0.25}, prune::Order::ascending, ctx);
  CHECK(std::is_sorted(sweep.ratios.begin(), sweep.ratios.end()));
  REQUIRE(sweep.results.size() == 4);
  CHECK(sweep.results[0].kl_divergence == 0.0);
  CHECK(sweep.results[0].gen_similarity == 1.0);
  CHECK(sweep.results[1].removed == 2);
  CHECK(sweep.results[2].removed == 4);
  CHECK(sweep.results[3].removed == 8);
  CHECK(sweep.saliency == fit.direction.cwiseAbs());

  // every dimension gone leaves uniform logits
  const Vector uniform = Vector::Constant(32, 1.0 / 32);
  CHECK(sweep.results[3].kl_divergence == doctest::Approx(prune::kl_divergence(uniform, alpha)).epsilon(1e-12));

  // cached fast path against the pruned model's own forward pass
  const std::vector<std::size_t> removed{1, 5, 6};
  const ProbStats direct = lm::accumulate_probs(ctx.pruned_model(removed), eval_set());
  CHECK((ctx.averaged_distribution(removed) - direct.sum / static_cast<double>(direct.positions))
            .cwiseAbs()
            .maxCoeff() < 1e-13);

  const auto random_a = prune::prune_sweep(fit, {0.5}, prune::Order::random, ctx, 3);
  const auto random_b = prune::prune_sweep(fit, {0.5}, prune::Order::random, ctx, 3);
  CHECK(random_a.results[0].kl_divergence == random_b.results[0].kl_divergence);
  CHECK(random_a.results[0].gen_similarity == random_b.results[0].gen_similarity);

  const std::string csv = prune::sweep_csv({sweep});
  CHECK(csv.rfind("ratio,order,kl,gen_similarity\n", 0) == 0);
  CHECK(csv.find("0,ascending,0,1\n") != std::string::npos);

  CHECK_THROWS_AS(prune::prune_sweep(fit, {1.5}, prune::Order::ascending, ctx), InvariantError);
}

TEST_CASE("tied models lose the same columns of the input embedding") {
  const lm::Model model = trained_small(true);
  const prune::MicroPruneContext ctx(model, eval_set(), std::nullopt);
  const std::vector<std::size_t> removed{0, 3};
  const lm::Model pruned = ctx.pruned_model(removed);
  CHECK(pruned.params().tok_emb.col(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(pruned.params().tok_emb.col(3).cwiseAbs().maxCoeff() == 0.0);

  const EmbeddingMatrix emb{model.output_embedding(), {}, true};
  const EncodingFit fit = probe::fit_encoding(ctx.averaged_distribution({}), emb);
  const auto sweep = prune::prune_sweep(fit, {0.0, 0.5}, prune::Order::descending, ctx);
  CHECK(sweep.results[0].kl_divergence == 0.0);
  CHECK(sweep.results[1].kl_divergence > 0.0);
  CHECK(std::isnan(sweep.results[1].gen_similarity));
}
