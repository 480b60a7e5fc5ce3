// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "ted/config.hpp"
#include "ted/errors.hpp"
#include "ted/experiment.hpp"

using namespace ted;
namespace fs = std::filesystem;

namespace {

const char* kTinyCls = R"(# small classification setup
[task]
kind = cls
name = tiny-cls
seed = 3
num_samples = 120
seq_len = 8
rule = majority
num_classes = 3
test_fraction = 0.25

[teacher]
depth = 2
hidden_dim = 16
head_count = 2
ffn_dim = 32
seed = 4

[student]
depth = 1
hidden_dim = 16
head_count = 2
ffn_dim = 32
init = fresh

[optim.teacher]
lr = 3e-3
batch_size = 8
epochs = 1
log_every = 3

[optim.stage1]
lr = 3e-3
batch_size = 8
epochs = 1
log_every = 3

[optim.stage2]
lr = 3e-3
batch_size = 8
epochs = 1
log_every = 3

[distill]
layer_map = explicit:2
alpha2_sweep = 0.1,1

[run]
seeds = 1,2,3
)";

struct Workspace {
  fs::path root;
  fs::path config;
  explicit Workspace(const std::string& name, const std::string& text = kTinyCls) {
    root = fs::temp_directory_path() / ("ted_cli_" + name);
    fs::remove_all(root);
    fs::create_directories(root);
    config = root / "exp.ini";
    std::ofstream(config) << text;
  }
  CommandOptions opts() const {
    CommandOptions o;
    o.config = config;
    o.out = root / "runs";
    return o;
  }
};

int run(const std::string& cmd, const CommandOptions& o, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int rc = run_command(cmd, o, out, err);
  if (err_text) *err_text = err.str();
  return rc;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> v;
  for (std::string l; std::getline(in, l);) v.push_back(l);
  return v;
}

}  // namespace

TEST(Config, ParsesAndRoundTrips) {
  const auto cfg = ExperimentConfig::parse(kTinyCls);
  EXPECT_EQ(cfg.task.kind, TaskKind::Classification);
  EXPECT_EQ(cfg.task.num_classes, 3u);
  EXPECT_EQ(cfg.teacher.depth, 2u);
  EXPECT_EQ(cfg.student.num_classes, 3u);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(cfg.alpha2_sweep, (std::vector<double>{0.1, 1.0}));
  EXPECT_EQ(cfg.distill.layer_map.indices(), (std::vector<std::size_t>{2}));
  const auto again = ExperimentConfig::parse(cfg.resolved());
  EXPECT_EQ(again.resolved(), cfg.resolved());
  EXPECT_EQ(again.hash(), cfg.hash());
}

TEST(Config, DefaultsAreUsedForMissingKeys) {
  const auto cfg = ExperimentConfig::parse(kTinyCls);
  EXPECT_EQ(cfg.distill.alpha1, 2.5);
  EXPECT_EQ(cfg.distill.temperature, 2.0);
  EXPECT_EQ(cfg.optim_stage2.hyper.warmup_ratio, 0.05);
}

TEST(Config, UnknownKeyReportsLine) {
  std::string text = kTinyCls;
  text.replace(text.find("epochs = 1"), 10, "epochz = 1");
  try {
    ExperimentConfig::parse(text);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line, 29u);
    EXPECT_NE(std::string(e.what()).find("epochz"), std::string::npos);
  }
  EXPECT_THROW(ExperimentConfig::parse(std::string(kTinyCls) + "\n[nope]\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse(kTinyCls, {"distill.temperature=0"}), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse(kTinyCls, {"distill.alpha3=1"}), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse(kTinyCls, {"distill.layer_map=explicit:3"}), ConfigError);
}

TEST(Config, OverridesApplyAndChangeTheHash) {
  const auto base = ExperimentConfig::parse(kTinyCls);
  const auto cfg = ExperimentConfig::parse(kTinyCls, {"distill.alpha2=0.5", "run.seeds=9"});
  EXPECT_EQ(cfg.distill.alpha2, 0.5);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{9}));
  EXPECT_NE(cfg.hash(), base.hash());
}

TEST(Cli, UnknownConfigKeyExitsWithTwo) {
  Workspace ws("badkey", std::string(kTinyCls) + "\n[run]\nbogus = 1\n");
  std::string err;
  EXPECT_EQ(run("train-teacher", ws.opts(), &err), kExitConfig);
  EXPECT_NE(err.find("bogus"), std::string::npos);
  CommandOptions o = Workspace("badset").opts();
  o.overrides = {"teacher.width=3"};
  EXPECT_EQ(run("train-teacher", o), kExitConfig);
  EXPECT_EQ(run("no-such-command", o), kExitConfig);
}

TEST(Cli, MissingArtifactsExitWithThree) {
  Workspace ws("missing");
  CommandOptions o = ws.opts();
  o.seed = 1;
  EXPECT_EQ(run("stage1", o), kExitArtifact);
  o.mode = "kd";
  EXPECT_EQ(run("distill", o), kExitArtifact);
  o.checkpoint = ws.root / "nothing.ckpt";
  EXPECT_EQ(run("eval", o), kExitArtifact);
}

class TinyPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ws_ = new Workspace("pipeline");
    ASSERT_EQ(run("train-teacher", ws_->opts()), kExitOk);
  }
  static void TearDownTestSuite() { delete ws_; }
  static Workspace* ws_;
};
Workspace* TinyPipeline::ws_ = nullptr;

TEST_F(TinyPipeline, CompleteRunsAreNotOverwritten) {
  std::string err;
  EXPECT_EQ(run("train-teacher", ws_->opts(), &err), kExitArtifact);
  EXPECT_NE(err.find("--force"), std::string::npos);
  const auto before = lines(ws_->root / "runs" / "teacher" / "manifest.json");
  CommandOptions o = ws_->opts();
  o.force = true;
  EXPECT_EQ(run("train-teacher", o), kExitOk);
  EXPECT_EQ(lines(ws_->root / "runs" / "teacher" / "manifest.json"), before);
}

TEST_F(TinyPipeline, FtAndKdRowsForThreeSeeds) {
  for (const char* mode : {"ft", "kd"}) {
    CommandOptions o = ws_->opts();
    o.mode = mode;
    ASSERT_EQ(run("distill", o), kExitOk) << mode;
  }
  CommandOptions c;
  const fs::path r = ws_->root / "runs";
  std::string ft, kd;
  for (int s = 1; s <= 3; ++s) {
    const std::string sd = "seed-" + std::to_string(s);
    ft += (r / sd / "distill-ft").string() + ",";
    kd += (r / sd / "distill-kd").string() + ",";
  }
  c.runs = {ft, kd};
  c.out = ws_->root / "cmp";
  ASSERT_EQ(run("compare", c), kExitOk);
  const auto rows = lines(c.out / "compare.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].rfind("ft,3,1 2 3,accuracy,", 0), 0u) << rows[1];
  EXPECT_EQ(rows[2].rfind("kd,3,1 2 3,accuracy,", 0), 0u) << rows[2];
  EXPECT_TRUE(fs::exists(c.out / "curves" / "kd.csv"));
}

TEST_F(TinyPipeline, CompareWithItselfHasZeroDelta) {
  CommandOptions o = ws_->opts();
  o.mode = "kd";
  o.seed = 1;
  o.tag = "self";
  ASSERT_EQ(run("distill", o), kExitOk);
  const std::string dir = (ws_->root / "runs" / "seed-1" / "distill-kd-self").string();
  CommandOptions c;
  c.runs = {dir, dir};
  c.out = ws_->root / "cmp-self";
  ASSERT_EQ(run("compare", c), kExitOk);
  const auto rows = lines(c.out / "compare.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2].substr(rows[2].rfind(',') + 1), "0");
  EXPECT_EQ(rows[2].substr(0, 9), "kd-self#2");
}

TEST_F(TinyPipeline, CompareNeedsTwoRuns) {
  CommandOptions c;
  c.runs = {(ws_->root / "runs" / "teacher").string()};
  c.out = ws_->root / "cmp-one";
  EXPECT_EQ(run("compare", c), kExitConfig);
}

TEST_F(TinyPipeline, CompareRejectsDifferentTasks) {
  Workspace other("other-task", std::string(kTinyCls).replace(std::string(kTinyCls).find("seed = 3"), 8, "seed = 8"));
  ASSERT_EQ(run("train-teacher", other.opts()), kExitOk);
  CommandOptions c;
  c.runs = {(ws_->root / "runs" / "teacher").string(), (other.root / "runs" / "teacher").string()};
  c.out = ws_->root / "cmp-mismatch";
  EXPECT_EQ(run("compare", c), kExitMismatch);
}

TEST_F(TinyPipeline, CompareDetectsTamperedArtifacts) {
  Workspace copy("tamper");
  fs::copy(ws_->root / "runs" / "teacher", copy.root / "teacher", fs::copy_options::recursive);
  std::ofstream(copy.root / "teacher" / "model.ckpt", std::ios::app) << "x";
  CommandOptions c;
  c.runs = {(ws_->root / "runs" / "teacher").string(), (copy.root / "teacher").string()};
  c.out = copy.root / "cmp";
  EXPECT_EQ(run("compare", c), kExitArtifact);
}

TEST_F(TinyPipeline, IncompatibleFiltersExitWithThree) {
  Workspace wide("wide-filters", std::string(kTinyCls).replace(std::string(kTinyCls).find("hidden_dim = 16"), 15,
                                                                "hidden_dim = 24"));
  ASSERT_EQ(run("train-teacher", wide.opts()), kExitOk);
  CommandOptions s = wide.opts();
  s.seed = 1;
  ASSERT_EQ(run("stage1", s), kExitOk);
  CommandOptions o = ws_->opts();
  o.seed = 1;
  o.tag = "foreign";
  o.filters_from = wide.root / "runs" / "seed-1" / "stage1";
  std::string err;
  EXPECT_EQ(run("stage1", o, &err), kExitArtifact);
  EXPECT_FALSE(err.empty());
}

TEST_F(TinyPipeline, EvalWritesReport) {
  CommandOptions o = ws_->opts();
  o.checkpoint = ws_->root / "runs" / "teacher" / "model.ckpt";
  o.out = ws_->root / "teacher_eval.json";
  ASSERT_EQ(run("eval", o), kExitOk);
  std::ifstream in(o.out);
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("metric"), "accuracy");
  EXPECT_GE(j.at("value").get<double>(), 0.0);
  EXPECT_LE(j.at("value").get<double>(), 1.0);
  o.split = "dev";
  EXPECT_EQ(run("eval", o), kExitConfig);
}

TEST(Smooth, TrailingAverage) {
  EXPECT_EQ(smooth({1, 2, 3, 4}, 2), (std::vector<double>{1, 1.5, 2.5, 3.5}));
  EXPECT_EQ(smooth({5, 1}, 10), (std::vector<double>{5, 3}));
  EXPECT_EQ(smooth({}, 3), std::vector<double>{});
}
