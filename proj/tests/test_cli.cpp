// End-to-end runs of the emprobe binary.

#include <doctest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

#include "emprobe/store.hpp"
#include "test_util.hpp"

using emprobe::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string err;
};

Run emprobe_run(const TempDir& dir, const std::string& args) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string("'") + EMPROBE_CLI_PATH + "' " + args + " > /dev/null 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  std::ifstream in(err);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WEXITSTATUS(status), ss.str()};
}

std::string slurp(const fs::path& p) { return emprobe::store::read_file(p); }

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

/// Small corpus and a briefly trained model shared by several cases.
struct Fixture {
  TempDir dir{"cli"};
  std::string corpus = (dir / "c.tokens").string();
  std::string model = (dir / "m").string();

  Fixture() {
    REQUIRE(emprobe_run(dir, "corpus --out " + corpus + " --vocab 32 --length 20000 --seed 3").code == 0);
    REQUIRE(emprobe_run(dir, "train --out-dir " + model + " --corpus " + corpus +
                                 " --vocab 32 --d-model 8 --heads 2 --layers 1 --d-ff 16 --context 16"
                                 " --steps 30 --checkpoint-steps 0,10,30")
                .code == 0);
  }
  std::string ckpt(int step) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "/step_%08d.ckpt", step);
    return model + buf;
  }
};

}  // namespace

TEST_CASE("train with zero steps writes one reproducible checkpoint") {
  TempDir dir("cli_train");
  const auto a = dir / "a", b = dir / "b";
  REQUIRE(emprobe_run(dir, "train --steps 0 --seed 1 --out-dir " + a.string()).code == 0);
  REQUIRE(emprobe_run(dir, "train --steps 0 --seed 1 --out-dir " + b.string()).code == 0);
  int ckpts = 0;
  for (const auto& e : fs::directory_iterator(a)) ckpts += e.path().extension() == ".ckpt";
  CHECK(ckpts == 1);
  CHECK(slurp(a / "step_00000000.ckpt") == slurp(b / "step_00000000.ckpt"));

  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  CHECK(manifest["command"] == "train");
  CHECK(manifest["config"]["seed"] == 1);
  CHECK(manifest["outputs"].size() >= 2);
  for (const auto& o : manifest["outputs"]) CHECK(o["sha256"].get<std::string>().size() == 64);
}

TEST_CASE("seed environment variable overrides the flag") {
  TempDir dir("cli_seed");
  setenv("EMPROBE_SEED", "7", 1);
  const auto r = emprobe_run(dir, "train --steps 0 --seed 1 --out-dir " + (dir / "a").string());
  unsetenv("EMPROBE_SEED");
  REQUIRE(r.code == 0);
  REQUIRE(emprobe_run(dir, "train --steps 0 --seed 7 --out-dir " + (dir / "b").string()).code == 0);
  CHECK(slurp(dir / "a" / "step_00000000.ckpt") == slurp(dir / "b" / "step_00000000.ckpt"));
}

TEST_CASE("configuration errors exit with code 2 and one diagnostic line") {
  TempDir dir("cli_cfg");
  const auto bad = emprobe_run(dir, "train --steps 0 --d-model 65 --heads 2 --out-dir " + (dir / "x").string());
  CHECK(bad.code == 2);
  CHECK(count_lines(bad.err) == 1);
  CHECK(bad.err.find("error[config]") != std::string::npos);

  CHECK(emprobe_run(dir, "frobnicate").code == 2);
  CHECK(emprobe_run(dir, "train --steps 0").code == 2);  // missing --out-dir
  CHECK(emprobe_run(dir, "train --steps 0 --lr nope --out-dir " + (dir / "y").string()).code == 2);
}

TEST_CASE("config file values apply and explicit flags win") {
  TempDir dir("cli_cfgfile");
  std::ofstream(dir / "train.cfg") << "# model\nd_model = 16\nheads=4\nseed=5\n";
  REQUIRE(emprobe_run(dir, "train --steps 0 --config " + (dir / "train.cfg").string() + " --seed 9 --out-dir " +
                               (dir / "a").string())
              .code == 0);
  const auto m = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
  CHECK(m["config"]["d_model"] == 16);
  CHECK(m["config"]["n_heads"] == 4);
  CHECK(m["config"]["seed"] == 9);

  std::ofstream(dir / "bad.cfg") << "d_model 16\n";
  CHECK(emprobe_run(dir, "train --steps 0 --config " + (dir / "bad.cfg").string() + " --out-dir " +
                             (dir / "b").string())
            .code == 2);
}

TEST_CASE("divergent training exits with code 3") {
  TempDir dir("cli_div");
  const auto r = emprobe_run(dir, "train --steps 20 --lr 1e300 --warmup 0 --corpus-length 2000 --vocab 32 --d-model 8 "
                                  "--heads 2 --layers 1 --d-ff 16 --context 8 --out-dir " +
                                      (dir / "a").string());
  CHECK(r.code == 3);
  CHECK(count_lines(r.err) == 1);
}

TEST_CASE("pipeline: eval, fit, steer, prune, dynamics") {
  Fixture fx;
  const auto& d = fx.dir;
  const std::string stats = (d / "p.stats").string();
  REQUIRE(emprobe_run(d, "eval --checkpoint " + fx.ckpt(30) + " --data " + fx.corpus +
                             " --seq-len 16 --max-seqs 100 --out " + stats)
              .code == 0);

  const auto fitdir = d / "fit";
  REQUIRE(emprobe_run(d, "fit --checkpoint " + fx.ckpt(30) + " --probstats " + stats + " --out-dir " + fitdir.string())
              .code == 0);
  const auto fit = nlohmann::json::parse(slurp(fitdir / "fit.json"));
  CHECK(fit["adj_r2"].get<double>() > 0.9);
  CHECK(fit["direction"].size() == 8);
  CHECK(fit.contains("random_adj_r2"));
  for (const char* f : {"fit.bin", "sparsity.csv", "pca2d.csv", "manifest.json"}) CHECK(fs::exists(fitdir / f));

  SUBCASE("unit scale is the identity") {
    const auto out = d / "s1";
    REQUIRE(emprobe_run(d, "steer --checkpoint " + fx.ckpt(30) + " --fit " + (fitdir / "fit.bin").string() +
                               " --detect " + fx.corpus + " --test " + fx.corpus +
                               " --seq-len 16 --detect-size 40 --test-size 40 --token 3 --scale 1 --out-dir " +
                               out.string())
                .code == 0);
    const auto j = nlohmann::json::parse(slurp(out / "steer.json"));
    CHECK(j["e_local"].get<double>() == 0.0);
    CHECK(j["e_id"].get<double>() == 0.0);
    CHECK(j["kl_retained"].get<double>() == 0.0);
    CHECK(j["e_ood"].is_null());
    CHECK(j["b"] == "2");
    CHECK(j["sig_transform"] == "one_minus_p");
    const auto patched = emprobe::store::read_as<emprobe::Checkpoint>(out / "steered.ckpt");
    const auto orig = emprobe::store::read_as<emprobe::Checkpoint>(fx.ckpt(30));
    CHECK(patched.output_embedding() == orig.output_embedding());
  }

  SUBCASE("doubling moves the measured scale toward two") {
    const auto out = d / "s2";
    REQUIRE(emprobe_run(d, "steer --checkpoint " + fx.ckpt(30) + " --fit " + (fitdir / "fit.json").string() +
                               " --test " + fx.corpus + " --seq-len 16 --test-size 40 --token 3 --scale 2 --out-dir " +
                               out.string())
                .code == 0);
    const auto j = nlohmann::json::parse(slurp(out / "steer.json"));
    CHECK(j["measured_scale"].get<double>() > 1.5);
    CHECK(j["measured_scale"].get<double>() < 2.5);
  }

  SUBCASE("steer rejects out-of-range tokens") {
    CHECK(emprobe_run(d, "steer --checkpoint " + fx.ckpt(30) + " --detect " + fx.corpus +
                             " --seq-len 16 --token 32 --scale 2 --out-dir " + (d / "s3").string())
              .code == 2);
  }

  SUBCASE("prune at ratio zero has zero divergence") {
    const auto csv = (d / "prune.csv").string();
    REQUIRE(emprobe_run(d, "prune --checkpoint " + fx.ckpt(30) + " --eval " + fx.corpus +
                               " --seq-len 16 --max-seqs 30 --gen-count 4 --gen-length 8 --ratios 0,0.5 --out " + csv)
                .code == 0);
    std::istringstream in(slurp(csv));
    std::string header, row0;
    std::getline(in, header);
    std::getline(in, row0);
    CHECK(header == "ratio,order,kl,gen_similarity");
    CHECK(row0 == "0,ascending,0,1");
    CHECK(emprobe_run(d, "prune --checkpoint " + fx.ckpt(30) + " --eval " + fx.corpus +
                             " --seq-len 16 --ratios 0,x --out " + csv)
              .code == 2);
  }

  SUBCASE("dynamics pins the endpoints and needs step zero") {
    const auto csv = (d / "dyn.csv").string();
    REQUIRE(emprobe_run(d, "dynamics --checkpoints " + fx.ckpt(30) + " " + fx.ckpt(0) + " --corpus " + fx.corpus +
                               " --groups out_emb --out " + csv)
                .code == 0);
    std::istringstream in(slurp(csv));
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    CHECK(line.rfind("0,out_emb,0,", 0) == 0);
    std::getline(in, line);
    CHECK(line.rfind("30,out_emb,1,", 0) == 0);

    const auto r = emprobe_run(d, "dynamics --checkpoints " + fx.ckpt(10) + " " + fx.ckpt(30) + " --corpus " +
                                      fx.corpus + " --out " + csv);
    CHECK(r.code == 2);
    CHECK(count_lines(r.err) == 1);
  }
}

TEST_CASE("missing and corrupt inputs exit with code 1") {
  TempDir dir("cli_io");
  CHECK(emprobe_run(dir, "eval --checkpoint " + (dir / "none.ckpt").string() + " --data x --out y").code == 1);
  std::ofstream(dir / "junk.ckpt") << "not a record";
  const auto r = emprobe_run(dir, "eval --checkpoint " + (dir / "junk.ckpt").string() + " --data x --out y");
  CHECK(r.code == 1);
  CHECK(r.err.find("error[store]") != std::string::npos);
}
