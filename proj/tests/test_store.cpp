#include <doctest.h>

#include <cstring>
#include <fstream>

#include "emprobe/error.hpp"
#include "emprobe/microlm.hpp"
#include "emprobe/store.hpp"
#include "test_util.hpp"

using namespace emprobe;
using namespace std::string_literals;
using emprobe::testing::TempDir;

namespace {

EmbeddingMatrix sample_matrix() {
  Rng rng(1);
  EmbeddingMatrix m{emprobe::testing::random_matrix(5, 3, rng), {"a", "b", "", "dé", "e"}, true};
  return m;
}

template <typename T>
T round_trip(const T& value) {
  return std::get<T>(store::decode(store::encode(value)));
}

std::string with_byte(std::string bytes, std::size_t at, char value) {
  bytes[at] = value;
  return bytes;
}

}  // namespace

TEST_CASE("embedding matrix round trip is bit exact") {
  const EmbeddingMatrix m = sample_matrix();
  const auto back = round_trip(m);
  CHECK(back.data == m.data);
  CHECK(back.vocab_labels == m.vocab_labels);
  CHECK(back.tied);
  CHECK(store::encode(back) == store::encode(m));

  EmbeddingMatrix unlabeled{m.data, {}, false};
  CHECK(round_trip(unlabeled).vocab_labels.empty());
}

TEST_CASE("header layout") {
  const std::string bytes = store::encode(sample_matrix());
  CHECK(bytes.substr(0, 8) == "EMPROBE1");
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);
  CHECK(static_cast<unsigned char>(bytes[9]) == 1);  // version, low byte first
  CHECK(static_cast<unsigned char>(bytes[10]) == 0);
  std::uint64_t rows = 0;
  std::memcpy(&rows, bytes.data() + 11, 8);
  CHECK(rows == 5);
}

TEST_CASE("every record kind round trips") {
  ProbStats ps(4);
  ps.add(Vector::Constant(4, 0.25));
  ps.add((Vector(4) << 0.1, 0.2, 0.3, 0.4).finished());
  const auto ps2 = round_trip(ps);
  CHECK(ps2.sum == ps.sum);
  CHECK(ps2.positions == 2);

  CorpusFreq f{{3, 0, 7}, 10};
  const auto f2 = round_trip(f);
  CHECK(f2.counts == f.counts);
  CHECK(f2.total == 10);

  EncodingFit fit;
  fit.direction = (Vector(2) << 1.5, -2.0).finished();
  fit.p_values = (Vector(2) << 0.01, 0.5).finished();
  fit.intercept = 0.25;
  fit.adj_r2 = 0.9;
  fit.r2 = 0.91;
  fit.dof = 17;
  fit.residual_variance = 0.125;
  fit.floor = 1e-12;
  const auto fit2 = round_trip(fit);
  CHECK(fit2.direction == fit.direction);
  CHECK(fit2.p_values == fit.p_values);
  CHECK(fit2.dof == 17);
  CHECK(fit2.floor == 1e-12);

  const auto corpus = lm::make_corpus(16, 100, CorpusGenerator::markov_bigram, 1.2, 3);
  const auto corpus2 = round_trip(corpus);
  CHECK(corpus2.tokens == corpus.tokens);
  CHECK(corpus2.generator == CorpusGenerator::markov_bigram);
  CHECK(corpus2.zipf_exponent == 1.2);

  MicroConfig c;
  c.vocab_size = 16;
  c.d_model = 4;
  c.n_heads = 2;
  c.d_ff = 8;
  c.context = 4;
  c.head_bias = true;
  c.seed = 9;
  const Checkpoint ck = lm::Model(c).to_checkpoint(12, "rng-bytes\x01\x00"s, "meta");
  const auto ck2 = round_trip(ck);
  CHECK(ck2.step == 12);
  CHECK(ck2.config.head_bias);
  CHECK(ck2.config.seed == 9);
  CHECK(ck2.rng_state == ck.rng_state);
  CHECK(ck2.metadata == "meta");
  REQUIRE(ck2.params.size() == ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    CHECK(ck2.params[i].first == ck.params[i].first);
    CHECK(ck2.params[i].second == ck.params[i].second);
  }
}

TEST_CASE("format errors") {
  const std::string good = store::encode(sample_matrix());
  CHECK_THROWS_AS(store::decode("NOTSTORE"), StoreError);
  CHECK_THROWS_AS(store::decode(with_byte(good, 0, 'X')), StoreError);
  CHECK_THROWS_AS(store::decode(with_byte(good, 8, 42)), StoreError);
  CHECK_THROWS_AS(store::decode(with_byte(good, 9, 2)), StoreError);
  CHECK_THROWS_AS(store::decode(good.substr(0, good.size() - 1)), StoreError);
  CHECK_THROWS_AS(store::decode(good + "x"), StoreError);
  for (std::size_t cut : {std::size_t{9}, std::size_t{11}, std::size_t{20}, std::size_t{40}})
    CHECK_THROWS_AS(store::decode(good.substr(0, cut)), StoreError);
}

TEST_CASE("invalid contents are rejected on both sides") {
  EmbeddingMatrix bad = sample_matrix();
  bad.data(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(store::encode(bad), InvariantError);

  EmbeddingMatrix labels = sample_matrix();
  labels.vocab_labels.pop_back();
  CHECK_THROWS_AS(store::encode(labels), InvariantError);

  CorpusFreq f{{1, 2}, 4};
  CHECK_THROWS_AS(store::encode(f), InvariantError);

  // a NaN smuggled into an otherwise valid payload fails on decode
  std::string bytes = store::encode(sample_matrix());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::memcpy(bytes.data() + 11 + 16, &nan, 8);
  CHECK_THROWS_AS(store::decode(bytes), InvariantError);
}

TEST_CASE("probability statistics invariants") {
  ProbStats ps(3);
  ps.add((Vector(3) << 0.2, 0.3, 0.5).finished());
  CHECK_NOTHROW(ps.validate());
  ps.sum[0] += 1e-3;
  CHECK_THROWS_AS(ps.validate(), InvariantError);

  ProbStats a(3), b(3);
  a.add((Vector(3) << 0.2, 0.3, 0.5).finished());
  b.add((Vector(3) << 0.6, 0.3, 0.1).finished());
  a.merge(b);
  CHECK(a.positions == 2);
  CHECK(a.sum[0] == doctest::Approx(0.8));
  CHECK_THROWS_AS(a.merge(ProbStats(4)), InvariantError);
}

TEST_CASE("files are written atomically and read back by kind") {
  TempDir dir("store");
  const auto path = dir / "m.bin";
  store::write_record(path, sample_matrix());
  CHECK(store::read_as<EmbeddingMatrix>(path).data == sample_matrix().data);
  CHECK_THROWS_AS(store::read_as<ProbStats>(path), StoreError);

  // no leftover temp siblings
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  CHECK(files == 1);

  // a failed encode leaves the previous file untouched
  EmbeddingMatrix bad = sample_matrix();
  bad.data(1, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS(store::write_record(path, bad));
  CHECK(store::read_as<EmbeddingMatrix>(path).data == sample_matrix().data);

  CHECK_THROWS_AS(store::read_record(dir / "missing.bin"), StoreError);
}
