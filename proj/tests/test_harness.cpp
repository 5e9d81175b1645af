#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "bhn/harness/checkpoint.hpp"
#include "bhn/harness/config.hpp"
#include "bhn/harness/datasets.hpp"
#include "bhn/harness/experiments.hpp"
#include "bhn/harness/metrics.hpp"

using namespace bhn;
using namespace bhn::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bhn_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Small glyph runs that finish in about a second.
ExperimentConfig tiny(const std::string& task, json extra = json::object()) {
  json base = {{"seed", 3},
               {"eval_samples", 8},
               {"data", {{"n_train", 200}, {"n_test", 100}}},
               {"model", {{"hidden", {16}}, {"depth", 2}, {"flow_hidden", 8}}},
               {"train", {{"epochs", 2}, {"batch_size", 50}}}};
  base.merge_patch(extra);
  return load_config(task, std::nullopt, base);
}

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(BHN_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

// ---- generators ----------------------------------------------------------

TEST(ToyRegression, DeterministicAndInRange) {
  auto a = gen_toy_regression(50, 9);
  auto b = gen_toy_regression(50, 9);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.y, b.y);
  for (double v : a.x) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 0.5);
  }
  EXPECT_NE(gen_toy_regression(50, 10).x, a.x);
}

TEST(ToyRegression, NoiselessCurve) {
  auto d = gen_toy_regression(100, 2, 0.0);
  const double pi = std::numbers::pi;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.x[i];
    EXPECT_DOUBLE_EQ(d.y[i], x + 0.3 * std::sin(2 * pi * x) + 0.3 * std::sin(4 * pi * x));
  }
}

TEST(OverparamLinear, ZeroNoiseIsIdentityAndNoiseHasRightMoments) {
  auto d = gen_overparam_linear(200, 0.0, 4);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.y[i], d.x[i]);
    EXPECT_GE(d.x[i], -1.0);
    EXPECT_LE(d.x[i], 1.0);
  }
  auto n = gen_overparam_linear(20000, 0.1, 5);
  double s = 0, ss = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double r = n.y[i] - n.x[i];
    s += r;
    ss += r * r;
  }
  const double m = s / 20000.0;
  EXPECT_NEAR(m, 0.0, 4 * 0.1 / std::sqrt(20000.0));
  EXPECT_NEAR(std::sqrt(ss / 20000.0 - m * m), 0.1, 0.003);
  EXPECT_THROW(gen_overparam_linear(5, -1.0, 1), ConfigError);
}

TEST(Glyphs, DeterministicInRangeAndCoverAllClasses) {
  GlyphSpec g;
  auto a = gen_glyphs(g, 300, 11);
  EXPECT_EQ(a.x, gen_glyphs(g, 300, 11).x);
  EXPECT_EQ(a.dim, 100u);
  for (double v : a.x) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < a.size(); ++i) seen.insert(a.label(i));
  EXPECT_EQ(seen.size(), 10u);
}

TEST(NoiseSources, RangeAndShape) {
  for (const auto& d : {uniform_noise(50, 7, 1), gaussian_noise(50, 7, 1)}) {
    EXPECT_EQ(d.size(), 50u);
    EXPECT_EQ(d.dim, 7u);
    for (double v : d.x) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(SplitByClass, RelabelsKeptRows) {
  Dataset d(1, 4);
  for (int c = 0; c < 4; ++c) d.add(std::vector<double>{double(c)}, double(c));
  auto [keep, held] = split_by_class(d, 1);
  EXPECT_EQ(keep.classes, 3u);
  EXPECT_EQ(keep.y, (std::vector<double>{0, 1, 2}));
  EXPECT_EQ(keep.x, (std::vector<double>{0, 2, 3}));
  EXPECT_EQ(held.y, (std::vector<double>{1}));
  EXPECT_THROW(split_by_class(d, 4), ConfigError);
}

// ---- IDX -----------------------------------------------------------------

TEST(Idx, ReadsTwoByTwoImage) {
  auto dir = scratch("idx");
  write_bytes(dir / "img", {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64});
  write_bytes(dir / "lab", {0, 0, 8, 1, 0, 0, 0, 1, 7});
  auto d = load_idx((dir / "img").string(), (dir / "lab").string());
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.dim, 4u);
  EXPECT_EQ(d.x, (std::vector<double>{0.0, 1.0, 128 / 255.0, 64 / 255.0}));
  EXPECT_EQ(d.label(0), 7u);
  EXPECT_EQ(d.classes, 8u);
}

TEST(Idx, MalformedFilesAreDataErrors) {
  auto dir = scratch("idx_bad");
  write_bytes(dir / "magic", {0, 0, 8, 4, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 9});
  write_bytes(dir / "short", {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3});
  write_bytes(dir / "img", {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 9});
  write_bytes(dir / "lab2", {0, 0, 8, 1, 0, 0, 0, 2, 0, 1});
  EXPECT_THROW(read_idx_images((dir / "magic").string()), DataError);
  EXPECT_THROW(read_idx_images((dir / "short").string()), DataError);
  EXPECT_THROW(load_idx((dir / "img").string(), (dir / "lab2").string()), DataError);
  EXPECT_THROW(read_idx_images((dir / "absent").string()), DataError);
}

TEST(Idx, WriteReadRoundTrip) {
  auto dir = scratch("idx_rt");
  auto g = gen_glyphs(GlyphSpec{}, 20, 1);
  write_idx_images((dir / "i").string(), g, 10, 10);
  write_idx_labels((dir / "l").string(), g);
  auto back = load_idx((dir / "i").string(), (dir / "l").string(), 10);
  EXPECT_EQ(back.y, g.y);
  for (std::size_t i = 0; i < g.x.size(); ++i) EXPECT_NEAR(back.x[i], g.x[i], 0.5 / 255.0 + 1e-12);
}

// ---- configuration -------------------------------------------------------

TEST(Config, PrecedenceDefaultsThenFileThenFlags) {
  const json file = {{"train", {{"epochs", 7}, {"lr", 0.5}}}};
  const json flags = {{"train", {{"epochs", 9}}}};
  auto c = load_config("classify", file, flags);
  EXPECT_EQ(c.train.epochs, 9u);
  EXPECT_EQ(c.train.lr, 0.5);
  EXPECT_EQ(c.train.batch_size, task_defaults("classify").train.batch_size);
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(load_config("classify", json{{"bogus", 1}}), ConfigError);
  EXPECT_THROW(load_config("classify", json{{"model", {{"flows", 1}}}}), ConfigError);
  EXPECT_THROW(load_config("classify", json{{"train", {{"epochs", "ten"}}}}), ConfigError);
  EXPECT_THROW(load_config("classify", json{{"model", {{"kind", "svm"}}}}), ConfigError);
}

TEST(Config, SeedIsRequired) {
  auto c = load_config("classify", std::nullopt);
  EXPECT_THROW(c.require_seed(), ConfigError);
  c.seed = 4;
  EXPECT_EQ(c.require_seed(), 4u);
}

TEST(Config, JsonRoundTrip) {
  auto c = tiny("adversary", {{"scores", {"bald"}}});
  auto back = load_config("adversary", to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

// ---- outputs -------------------------------------------------------------

TEST(MetricLog, StepsAndNonFiniteValues) {
  MetricLog log("r");
  log.record(1, {{"a", 1.5}, {"b", NAN}});
  log.record(1, {{"a", 2.0}}, "eval");
  EXPECT_THROW(log.record(0, {}), ConfigError);
  EXPECT_EQ(log.str(),
            "{\"metrics\":{\"a\":1.5,\"b\":null},\"run\":\"r\",\"step\":1}\n"
            "{\"metrics\":{\"a\":2.0},\"phase\":\"eval\",\"run\":\"r\",\"step\":1}\n");
}

TEST(Table, CsvAndShapeCheck) {
  Table t({"name", "v"});
  t.add({std::string("x"), 0.1});
  t.add({std::string("y"), NAN});
  EXPECT_EQ(t.csv(), "name,v\nx,0.1\ny,nan\n");
  EXPECT_THROW(t.add({0.1}), ConfigError);
  EXPECT_EQ(t.number(0, "v"), 0.1);
}

// ---- checkpoints ---------------------------------------------------------

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    auto cfg = tiny("train");
    dir = scratch("ckpt");
    cfg.output_dir = dir.string();
    run_experiment(cfg);
    bytes = slurp(dir / "checkpoint.bin");
  }
  fs::path dir;
  std::string bytes;
};

TEST_F(CheckpointTest, SaveLoadSaveIsByteIdentical) {
  EXPECT_EQ(serialize(deserialize(bytes)), bytes);
  auto ck = load_checkpoint((dir / "checkpoint.bin").string());
  EXPECT_EQ(ck.state.epoch, 2u);
  EXPECT_GT(ck.state.optimizer.steps(), 0u);
}

TEST_F(CheckpointTest, CorruptionIsDetected) {
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize(bad_magic), FormatError);

  auto bad_version = bytes;
  bad_version[8] = 9;
  try {
    deserialize(bad_version);
    FAIL() << "version mismatch accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }

  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  EXPECT_THROW(deserialize(flipped), FormatError);
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 5)), FormatError);
  EXPECT_THROW(deserialize(bytes.substr(0, 10)), FormatError);
}

TEST_F(CheckpointTest, SummaryListsParameters) {
  auto s = checkpoint_summary(deserialize(bytes));
  EXPECT_EQ(s["format_version"], kCheckpointVersion);
  EXPECT_EQ(s["epoch"], 2);
  EXPECT_TRUE(s["parameters"].contains("net.00.v"));
  EXPECT_EQ(s["config"]["task"], "train");
}

TEST(Resume, SplitRunMatchesUninterruptedRun) {
  auto whole = tiny("train", {{"train", {{"epochs", 4}}}});
  whole.output_dir = scratch("whole").string();
  run_experiment(whole);

  auto first = tiny("train");
  first.output_dir = scratch("first").string();
  run_experiment(first);
  auto second = first;
  second.output_dir = scratch("second").string();
  run_experiment(second, (fs::path(first.output_dir) / "checkpoint.bin").string());

  auto a = load_checkpoint((fs::path(whole.output_dir) / "checkpoint.bin").string());
  auto b = load_checkpoint((fs::path(second.output_dir) / "checkpoint.bin").string());
  EXPECT_EQ(a.state.epoch, 4u);
  EXPECT_EQ(b.state.epoch, 4u);
  EXPECT_EQ(a.state.model.params, b.state.model.params);
  EXPECT_EQ(a.state.optimizer, b.state.optimizer);
  EXPECT_EQ(a.state.rng.state(), b.state.rng.state());
}

// ---- experiments ---------------------------------------------------------

TEST(Experiments, RerunGivesByteIdenticalOutputs) {
  const char* files[] = {"metrics.jsonl", "summary.csv", "curves.csv", "checkpoint.bin"};
  for (const std::string task : {"classify", "anomaly", "adversary"}) {
    auto c = tiny(task, {{"anomaly", {{"n_ood", 50}}}, {"adversary", {{"n_attack", 20}}}});
    c.output_dir = scratch("det").string();
    run_experiment(c);
    std::vector<std::string> first;
    for (const char* f : files) first.push_back(slurp(fs::path(c.output_dir) / f));
    fs::remove_all(c.output_dir);
    run_experiment(c);
    for (std::size_t i = 0; i < first.size(); ++i)
      EXPECT_EQ(slurp(fs::path(c.output_dir) / files[i]), first[i]) << task << " " << files[i];
    EXPECT_FALSE(first[0].empty());
  }
}

TEST(Experiments, MleRegressionHasNoBand) {
  auto c = load_config("regress-demo", std::nullopt,
                       {{"seed", 1}, {"grid_points", 37}, {"model", {{"kind", "mle"}}}, {"train", {{"epochs", 20}}}});
  auto out = run_experiment(c);
  ASSERT_EQ(out.curves.size(), 37u);
  for (std::size_t i = 0; i < out.curves.size(); ++i) {
    EXPECT_EQ(out.curves.number(i, "std"), 0.0);
    EXPECT_EQ(out.curves.number(i, "lower"), out.curves.number(i, "upper"));
  }
  EXPECT_DOUBLE_EQ(out.curves.number(0, "x"), -0.5);
  EXPECT_DOUBLE_EQ(out.curves.number(36, "x"), 1.2);
}

TEST(Experiments, MultimodalReportsQuadrantFractions) {
  auto c = load_config("multimodal-demo", std::nullopt,
                       {{"seed", 1}, {"posterior_draws", 64}, {"model", {{"depth", 2}, {"flow_hidden", 8}}},
                        {"train", {{"epochs", 3}}}});
  auto out = run_experiment(c);
  EXPECT_EQ(out.curves.size(), 64u);
  double total = 0;
  for (const char* k : {"frac_pp", "frac_mm", "frac_pm", "frac_mp"}) total += out.report[k].get<double>();
  EXPECT_DOUBLE_EQ(total, 1.0);
}

TEST(ActiveLearning, SeedSetPoolAndReproducibility) {
  const json extra = {{"active",
                       {{"pool_size", 200}, {"rounds", 2}, {"acquire", 10}, {"epochs_per_round", 1},
                        {"acquisition", "random"}}}};
  auto c = tiny("active-learn", extra);
  auto out = run_experiment(c);
  ASSERT_EQ(out.curves.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(out.curves.number(r, "n_labelled"), 20.0 + 10.0 * r);
  const auto acquired = out.report["acquired"][0].get<std::vector<std::vector<std::size_t>>>();
  ASSERT_EQ(acquired.size(), 2u);
  std::set<std::size_t> all;
  for (const auto& round : acquired) {
    EXPECT_EQ(round.size(), 10u);
    all.insert(round.begin(), round.end());
  }
  EXPECT_EQ(all.size(), 20u);
  EXPECT_EQ(run_experiment(c).report["acquired"], out.report["acquired"]);

  auto bald = tiny("active-learn", extra);
  bald.active.acquisition = "bald";
  EXPECT_EQ(run_experiment(bald).curves.size(), 3u);
}

TEST(ActiveLearning, BalancedSeedSet) {
  auto d = gen_glyphs(GlyphSpec{}, 300, 2);
  Rng rng(1);
  auto idx = balanced_seed_set(d, 2, rng);
  ASSERT_EQ(idx.size(), 20u);
  std::vector<int> count(10, 0);
  for (auto i : idx) ++count[d.label(i)];
  for (int c : count) EXPECT_EQ(c, 2);
  Dataset small(1, 3);
  small.add(std::vector<double>{0.0}, 0.0);
  EXPECT_THROW(balanced_seed_set(small, 1, rng), DataError);
}

TEST(Anomaly, IdenticalDistributionControlIsNearChance) {
  auto c = tiny("anomaly", {{"data", {{"n_test", 600}}}, {"anomaly", {{"sources", {"copy"}}}}});
  auto out = run_experiment(c);
  for (const auto& [score, v] : out.report["detection"]["copy"].items())
    EXPECT_NEAR(v["auc_roc"].get<double>(), 0.5, 0.05) << score;
}

TEST(Anomaly, UnseenClassMode) {
  auto c = tiny("anomaly", {{"anomaly", {{"mode", "unseen"}, {"excluded_class", 3}}}});
  auto out = run_experiment(c);
  EXPECT_TRUE(out.report["detection"].contains("class_3"));
  EXPECT_EQ(out.summary.text(0, "mode"), "unseen");
}

TEST(Adversary, OneRowPerGradSampleCountAndStep) {
  auto c = tiny("adversary", {{"adversary", {{"steps", {0.0, 0.1}}, {"grad_samples", {1, 4}}, {"n_attack", 30}}}});
  auto out = run_experiment(c);
  ASSERT_EQ(out.curves.size(), 4u);
  EXPECT_EQ(out.curves.number(0, "grad_samples"), 1.0);
  EXPECT_EQ(out.curves.number(3, "grad_samples"), 4.0);
  EXPECT_EQ(out.curves.number(3, "step"), 0.1);
  EXPECT_NO_THROW(out.curves.column("bald_adv_auc"));
}

// ---- command line --------------------------------------------------------

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  const std::string out = " --out " + dir.string();
  const std::string small = " --n-train 100 --n-test 50 --hidden 8 --depth 1 --flow-hidden 4 --eval-samples 4";
  EXPECT_EQ(run_cli("classify --epochs 1" + small + out), 1) << "missing seed";
  EXPECT_EQ(run_cli("classify --seed 1 --model nope" + out), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("classify --seed 1 --data idx --train-images /nonexistent --train-labels /nonexistent "
                    "--test-images /nonexistent --test-labels /nonexistent" + out),
            2);
  EXPECT_EQ(run_cli("regress-demo --seed 1 --epochs 50 --lr 100" + out), 3);
  EXPECT_EQ(run_cli("train --seed 1 --epochs 1" + small + out), 0);
  for (const char* f : {"metrics.jsonl", "summary.csv", "curves.csv", "checkpoint.bin"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(run_cli("inspect-checkpoint " + (dir / "checkpoint.bin").string()), 0);
  EXPECT_EQ(run_cli("inspect-checkpoint " + (dir / "summary.csv").string()), 2);
  EXPECT_EQ(run_cli("train --seed 1 --epochs 1 --resume " + (dir / "checkpoint.bin").string() + small + out), 0);

  std::ofstream(dir / "cfg.json") << R"({"train": {"epochs": 1}, "unknown": 0})";
  EXPECT_EQ(run_cli("classify --seed 1 --config " + (dir / "cfg.json").string() + out), 1);
}
