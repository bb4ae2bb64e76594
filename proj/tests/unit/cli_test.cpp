#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "json.hpp"
#include "pbp/bundle.hpp"
#include "pbp/cli/commands.hpp"
#include "pbp/cli/dataset.hpp"
#include "pbp/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = pbp::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<double>> read_csv(const fs::path& p) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

class Cli : public ::testing::Test {
 protected:
  void SetUp() override { dir_ = fixtures::temp_dir("cli"); }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

// Trained once and shared by the eval and viz tests.
class SmokeRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(fixtures::temp_dir("smoke"));
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = cli({"train", "--classes", "4", "--epochs", "5", "--base-classes", "4", "--test-shots", "10",
                        "--seed", "1", "--out", (*dir_ / "run").string()});
    seconds_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    code_ = r.code;
    log_ = r.err;
  }
  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete dir_;
  }
  static std::string seed_dir() { return (*dir_ / "run" / "seed-1").string(); }
  static std::string checkpoint() { return seed_dir() + "/checkpoint.pbck"; }
  static std::string train_bundle() { return seed_dir() + "/data/train.pbeb"; }
  static std::string test_bundle() { return seed_dir() + "/data/test.pbeb"; }

  static fs::path* dir_;
  static double seconds_;
  static int code_;
  static std::string log_;
};

fs::path* SmokeRun::dir_ = nullptr;
double SmokeRun::seconds_ = 0.0;
int SmokeRun::code_ = -1;
std::string SmokeRun::log_;

TEST_F(Cli, GenDataWritesTheRequestedCounts) {
  const auto r = cli({"gen-data", "--classes", "4", "--modes", "1", "--shots", "1", "--test-shots", "0", "--out",
                      path("d")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto b = pbp::vlp::load_bundle(dir_ / "d" / "train.pbeb");
  EXPECT_EQ(b.images.size(), 4u);
  EXPECT_EQ(b.c, 4u);
  EXPECT_FALSE(fs::exists(dir_ / "d" / "test.pbeb"));
  const auto side = json::parse(slurp(dir_ / "d" / "dataset.json"));
  EXPECT_EQ(side["classes"], 4);
  EXPECT_EQ(side["encoder"]["modes"], 1);
  EXPECT_EQ(json::parse(r.out)["train_images"], 4);
}

TEST_F(Cli, GenDataIsByteReproducible) {
  ASSERT_EQ(cli({"gen-data", "--classes", "3", "--shots", "2", "--test-shots", "2", "--seed", "9", "--out", path("a")}).code, 0);
  ASSERT_EQ(cli({"gen-data", "--classes", "3", "--shots", "2", "--test-shots", "2", "--seed", "9", "--out", path("b")}).code, 0);
  ASSERT_EQ(cli({"gen-data", "--classes", "3", "--shots", "2", "--test-shots", "2", "--seed", "10", "--out", path("c")}).code, 0);
  for (const auto* f : {"train.pbeb", "test.pbeb"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
    EXPECT_NE(slurp(dir_ / "a" / f), slurp(dir_ / "c" / f)) << f;
  }
}

TEST_F(Cli, EveryConfigFlagOverridesTheConfigFile) {
  struct Case {
    std::string flag, file_value, flag_value;
  };
  const std::vector<Case> cases{
      {"--tau", "0.02", "0.03"},          {"--eta", "0.5", "0.25"},
      {"--lambda", "0.1", "0.9"},         {"--samples", "3", "2"},
      {"--prompt-length", "2", "4"},      {"--heads", "4", "8"},
      {"--base-lr", "0.001", "0.004"},    {"--warmup-epochs", "0", "1"},
      {"--warmup-lr", "0.0001", "0.0002"}, {"--epochs", "2", "1"},
      {"--batch-size", "2", "1"},         {"--kl-weight", "0.5", "0.75"},
      {"--detach-p", "false", "true"},    {"--regularizer", "none", "ot"},
      {"--momentum", "0.5", "0.25"},      {"--literal-kl-sign", "false", "true"},
      {"--deterministic-prompts", "false", "true"}, {"--predict-mode", "sample", "mean-latent"},
      {"--sinkhorn-epsilon", "0.5", "0.1"}, {"--sinkhorn-max-iters", "10", "500"},
      {"--sinkhorn-tol", "0.01", "0.0001"},
  };
  ASSERT_EQ(cases.size(), pbp::cli::config_flag_names().size());

  const auto key_of = [](const std::string& flag) {
    std::string k = flag.substr(2);
    std::replace(k.begin(), k.end(), '-', '_');
    return k;
  };
  const auto to_json_value = [](const std::string& text) {
    try {
      return json::parse(text);
    } catch (const json::exception&) {
      return json(text);
    }
  };
  for (const auto& c : cases) {
    ASSERT_NE(std::find(pbp::cli::config_flag_names().begin(), pbp::cli::config_flag_names().end(), c.flag),
              pbp::cli::config_flag_names().end())
        << c.flag;
    json file = {{"epochs", 1}};
    const auto key = key_of(c.flag);
    const bool nested = key.rfind("sinkhorn_", 0) == 0;
    if (nested) {
      file["sinkhorn"][key.substr(9)] = to_json_value(c.file_value);
    } else {
      file[key] = to_json_value(c.file_value);
    }
    std::ofstream(dir_ / "cfg.json") << file.dump();
    const auto out = path("o" + key);
    const auto r = cli({"train", "--config", path("cfg.json"), c.flag, c.flag_value, "--classes", "2", "--shots", "1",
                        "--test-shots", "1", "--out", out});
    ASSERT_EQ(r.code, 0) << c.flag << ": " << r.err;
    const auto run = json::parse(slurp(fs::path(out) / "seed-1" / "run.json"));
    const auto got = nested ? run["config"]["sinkhorn"][key.substr(9)] : run["config"][key];
    EXPECT_EQ(got, to_json_value(c.flag_value)) << c.flag;
  }
}

TEST_F(Cli, RegularizerFlagDispatchesToSinkhorn) {
  const auto r = cli({"train", "--regularizer", "ot", "--epochs", "1", "--classes", "2", "--shots", "2",
                      "--test-shots", "1", "--out", path("ot")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream trace(slurp(dir_ / "ot" / "seed-1" / "trace.jsonl"));
  std::string line;
  int lines = 0;
  while (std::getline(trace, line)) {
    const auto rec = json::parse(line);
    ASSERT_TRUE(rec.contains("ot_residual"));
    EXPECT_LE(rec["ot_residual"].get<double>(), 1e-6);
    ++lines;
  }
  EXPECT_EQ(lines, 2);  // one base class, two shots, one epoch
}

TEST_F(Cli, SeedRangeWritesASummary) {
  const auto r = cli({"train", "--seeds", "3..4", "--epochs", "1", "--classes", "2", "--shots", "1", "--test-shots",
                      "2", "--out", path("multi")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto summary = json::parse(r.out);
  ASSERT_EQ(summary["runs"].size(), 2u);
  EXPECT_EQ(summary["runs"][1]["seed"], 4);
  EXPECT_TRUE(fs::exists(dir_ / "multi" / "seed-3" / "metrics.json"));
  EXPECT_TRUE(fs::exists(dir_ / "multi" / "seed-4" / "checkpoint.pbck"));
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"train", "--help"}).code, 0);
  EXPECT_EQ(cli({"train", "--out", path("x"), "--eta", "lots"}).code, 1);
  EXPECT_EQ(cli({"train", "--out", path("x"), "--lambda", "2"}).code, 1);
  EXPECT_EQ(cli({"train", "--out", path("x"), "--seed", "1", "--seeds", "1..2"}).code, 1);
  EXPECT_EQ(cli({"eval", "--checkpoint", path("none.pbck"), "--bundle", path("none.pbeb")}).code, 3);

  const auto abort = cli({"train", "--warmup-lr", "1e150", "--epochs", "1", "--classes", "2", "--shots", "2",
                          "--test-shots", "1", "--out", path("nan")});
  EXPECT_EQ(abort.code, 2);
  EXPECT_NE(abort.err.find("numeric_abort"), std::string::npos);
  const auto diag = json::parse(slurp(dir_ / "nan" / "seed-1" / "diagnostic.json"));
  EXPECT_EQ(diag["error"], "numeric_abort");
  EXPECT_TRUE(diag.contains("step"));
  EXPECT_TRUE(fs::exists(dir_ / "nan" / "seed-1" / "trace.jsonl"));
}

TEST_F(SmokeRun, CompletesWellUnderAMinute) {
  ASSERT_EQ(code_, 0) << log_;
  EXPECT_LT(seconds_, 60.0);
  const auto m = json::parse(slurp(fs::path(seed_dir()) / "metrics.json"));
  EXPECT_TRUE(m["new"].is_null());
  EXPECT_TRUE(m["h"].is_null());
}

TEST_F(SmokeRun, EvalOnTheTrainingSetIsAccurate) {
  ASSERT_EQ(code_, 0) << log_;
  const auto r = cli({"eval", "--checkpoint", checkpoint(), "--bundle", train_bundle(), "--split", "all"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["classifier"], "prompt");
  EXPECT_EQ(j["images"], 64);
  EXPECT_GE(j["accuracy"].get<double>(), 0.95);
}

TEST_F(SmokeRun, SampleCountAndHarmonicMean) {
  ASSERT_EQ(code_, 0) << log_;
  const auto one = json::parse(cli({"eval", "--checkpoint", checkpoint(), "--bundle", test_bundle(), "--samples", "1",
                                    "--base-classes", "2"}).out);
  const auto many = json::parse(cli({"eval", "--checkpoint", checkpoint(), "--bundle", test_bundle(), "--samples",
                                     "20", "--base-classes", "2", "--out", (*dir_ / "eval.json").string()}).out);
  EXPECT_EQ(one["samples"], 1);
  EXPECT_EQ(many["samples"], 20);
  EXPECT_EQ(json::parse(slurp(*dir_ / "eval.json")), many);
  for (const auto& j : {one, many}) {
    const double base = j["base"], novel = j["new"];
    EXPECT_NEAR(j["h"].get<double>(), pbp::trainer::harmonic_mean(base, novel), 1e-12);
    EXPECT_EQ(j["per_class"].size(), 4u);
  }
  const auto base_only = json::parse(cli({"eval", "--checkpoint", checkpoint(), "--bundle", test_bundle(), "--split",
                                          "base", "--base-classes", "2"}).out);
  EXPECT_EQ(base_only["images"], 20);
}

TEST_F(SmokeRun, EvalRejectsAMismatchedBundle) {
  ASSERT_EQ(code_, 0) << log_;
  pbp::vlp::VlpConfig v;
  v.d = 8;
  v.m = 4;
  v.b = 1;
  v.num_classes = 2;
  const pbp::vlp::SyntheticVlp small(v);
  const auto path = *dir_ / "narrow" / "x.pbeb";
  fs::create_directories(path.parent_path());
  pbp::vlp::write_bundle(pbp::vlp::make_synthetic_dataset(small, 1, 0).train, path);
  const auto r = cli({"eval", "--checkpoint", checkpoint(), "--bundle", path.string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("does not match"), std::string::npos);
}

TEST_F(Cli, VizSingleClassPlanIsAllOnes) {
  ASSERT_EQ(cli({"gen-data", "--classes", "1", "--shots", "1", "--test-shots", "0", "--out", path("one")}).code, 0);
  const auto r = cli({"viz", "--bundle", path("one/train.pbeb"), "--out", path("viz1")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto plan = read_csv(dir_ / "viz1" / "plan.csv");
  ASSERT_EQ(plan.size(), 16u);
  for (const auto& row : plan) EXPECT_EQ(row, std::vector<double>{1.0});
  const auto pgm = slurp(dir_ / "viz1" / "heatmap.pgm");
  EXPECT_EQ(pgm.rfind("P2\n4 4\n255\n", 0), 0u);
}

TEST_F(Cli, VizMatchesBruteForcePlans) {
  ASSERT_EQ(cli({"gen-data", "--classes", "3", "--shots", "2", "--test-shots", "0", "--out", path("three")}).code, 0);
  const auto r = cli({"viz", "--bundle", path("three/train.pbeb"), "--image-index", "4", "--class-index", "2",
                      "--all-classes", "--tau", "0.05", "--out", path("viz3")});
  ASSERT_EQ(r.code, 0) << r.err;

  const auto b = pbp::vlp::load_bundle(dir_ / "three" / "train.pbeb");
  const auto& img = b.images[4];
  const naive::Vec u(img.patches.begin(), img.patches.end()), g(b.class_embeddings.begin(), b.class_embeddings.end());
  const naive::Vec f(img.global.begin(), img.global.end());
  const auto p = naive::class_probs(f, g, 3, b.d, 0.05);
  const auto want = naive::conditional_transport(u, g, p, b.m, 3, b.d, 0.5);

  const auto plan = read_csv(dir_ / "viz3" / "plan.csv");
  const auto reverse = read_csv(dir_ / "viz3" / "reverse.csv");
  ASSERT_EQ(plan.size(), b.m);
  ASSERT_EQ(reverse.size(), 1u);
  for (std::size_t i = 0; i < b.m; ++i) {
    ASSERT_EQ(plan[i].size(), 3u);
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_NEAR(plan[i][c], want.forward[i * 3 + c], 1e-9);
      s += plan[i][c];
    }
    EXPECT_NEAR(s, 1.0, 1e-8);
    EXPECT_NEAR(reverse[0][i], want.backward[2 * b.m + i], 1e-9);
  }
}

TEST_F(Cli, VizRejectsOutOfRangeIndices) {
  ASSERT_EQ(cli({"gen-data", "--classes", "2", "--shots", "1", "--test-shots", "0", "--out", path("two")}).code, 0);
  EXPECT_EQ(cli({"viz", "--bundle", path("two/train.pbeb"), "--image-index", "2", "--out", path("v")}).code, 1);
  EXPECT_EQ(cli({"viz", "--bundle", path("two/train.pbeb"), "--class-index", "2", "--out", path("v")}).code, 1);
}

TEST_F(SmokeRun, VizWithACheckpointUsesThePrompts) {
  ASSERT_EQ(code_, 0) << log_;
  const auto r = cli({"viz", "--checkpoint", checkpoint(), "--bundle", test_bundle(), "--image-index", "3", "--out",
                      (*dir_ / "viz").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["class_source"], "prompts");
}
