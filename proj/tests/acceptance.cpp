// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero if any
// criterion fails. Pipelines run through the same command layer as the `ted` executable, on the
// shipped configs, under a scratch output root.
//
//   acceptance <configs-dir> [scratch-dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "json.hpp"
#include "ted/distill.hpp"
#include "ted/experiment.hpp"
#include "ted/filters.hpp"
#include "ted/hash.hpp"
#include "ted/layer_map.hpp"
#include "ted/ops.hpp"
#include "ted/trainer.hpp"

using namespace ted;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

fs::path g_configs;
fs::path g_scratch;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;
  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("FAILED " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

/// Runs a command, echoing its log to stderr. Returns the exit code.
int ted(const std::string& cmd, CommandOptions o) {
  std::ostringstream out, err;
  const int rc = run_command(cmd, o, out, err);
  std::cerr << out.str() << err.str();
  return rc;
}

CommandOptions opts(const std::string& config, const fs::path& root) {
  CommandOptions o;
  o.config = g_configs / config;
  o.out = root;
  return o;
}

json manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) return json::object();
  return json::parse(in);
}

double final_value(const fs::path& dir) { return manifest(dir).at("final_metrics").at("value").get<double>(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(std::move(cells));
  }
  return rows;
}

// ---------------------------------------------------------------------------------------------

Verdict criterion1() {
  Verdict v;
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  std::size_t ops = 0;
  for (const auto& gc : ted::testing::grad_cases()) {
    double op_worst = 0.0;
    std::size_t instances = 0;
    for (int i = 0; i < 10; ++i) {
      const auto rep = gc.instance(rng);
      op_worst = std::max(op_worst, rep.max_err);
      instances += rep.checked > 0;
    }
    v.check(instances >= 10, gc.op + " ran fewer than 10 instances");
    v.check(op_worst <= 1e-4, gc.op + " max error " + fmt(op_worst));
    worst = std::max(worst, op_worst);
    ++ops;
  }
  const double secs = seconds_since(t0);
  v.check(secs < 60.0, "gradient checks took " + fmt(secs) + " s");
  v.note(std::to_string(ops) + " ops x 10 instances, max err " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s");
  return v;
}

Verdict criterion2() {
  Verdict v;
  Rng rng(7);
  for (const double T : {0.5, 1.0, 2.0, 10.0}) {
    const auto z = ted::testing::random_tensor(rng, {3, 5}, 2.0);
    const double p = pred_distill_loss(z, z.clone(), T).item();
    v.check(std::abs(p) <= 1e-12, "pred(z,z," + fmt(T) + ") = " + fmt(p));
  }
  const Tensor<double> zt({1, 2}, {1.0, 0.0}), zs({1, 2}, {0.0, 1.0}, true);
  const double hand = pred_distill_loss(zt, zs, 1.0).item();
  v.check(std::abs(hand - 0.4622) <= 1e-4, "pred([1,0],[0,1],1) = " + fmt(hand));

  ModelConfig c;
  c.depth = 3;
  c.hidden_dim = 16;
  c.head_count = 2;
  c.ffn_dim = 32;
  c.vocab_size = 12;
  c.max_seq_len = 8;
  const TransformerModel<double> teacher(c, 5);
  const LayerMap map = LayerMap::identity(3);
  const TransformerModel<double> student = init_student_from_teacher(teacher, c, map);
  const TokenBatch batch =
      make_batch(TaskKind::CausalLM, std::vector<std::vector<std::int32_t>>{{1, 2, 3, 4, 5, 6}, {7, 8, 9, 10, 11, 0}});
  const auto ht = teacher.forward(batch).hidden_states, hs = student.forward(batch).hidden_states;
  FilterSpec spec;
  spec.arch = FilterArch::LinearProjection;
  spec.in_dim = spec.out_dim = 16;
  spec.with_head = false;
  spec.seed = 9;
  FilterBank<double> bt = build_filter_bank<double>(spec, BankOwner::Teacher, map);
  FilterBank<double> bs = bt.clone();
  bs.owner = BankOwner::Student;
  bt.set_trainable(false);
  const double tl = ted_loss(ht, hs, bt, bs, map, {}).item();
  v.check(tl == 0.0, "ted_loss for identical models and filters = " + fmt(tl));

  Projections<double> proj = Projections<double>::init(3, 16, 16, 1);
  for (auto& w : proj.weights) {
    auto vals = w.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = (i / 16 == i % 16);
  }
  std::vector<Tensor<double>> copied;
  for (const auto& h : ht) copied.push_back(h.clone());
  const double lw = layerwise_loss(ht, copied, proj, map).item();
  v.check(lw == 0.0, "layerwise_loss under identity projections = " + fmt(lw));
  v.note("pred(hand) = " + fmt(hand, 8));
  return v;
}

Verdict criterion3() {
  Verdict v;
  const LayerMap map(MapPolicy::SkipAlternate, 6, 12);
  const std::vector<std::size_t> want{1, 3, 5, 8, 10, 12};
  v.check(map.indices() == want, "SkipAlternate(6, 12) differs from {1,3,5,8,10,12}");
  std::string got;
  for (auto i : map.indices()) got += (got.empty() ? "" : ",") + std::to_string(i);
  v.note("M = {" + got + "}");
  return v;
}

/// Stage-II gradient of an FT objective versus plain fine-tuning, bit for bit.
bool ft_gradient_bit_exact() {
  ModelConfig c;
  c.depth = 4;
  c.hidden_dim = 16;
  c.head_count = 2;
  c.ffn_dim = 32;
  c.vocab_size = 17;
  c.max_seq_len = 8;
  c.dropout_rate = 0.1;
  TransformerModel<float> teacher(c, 31);
  const LayerMap map(MapPolicy::SkipAlternate, 2, 4);
  ModelConfig sc = c;
  sc.depth = 2;
  TransformerModel<float> a = init_student_from_teacher(teacher, sc, map);
  TransformerModel<float> b = init_student_from_teacher(teacher, sc, map);
  teacher.set_trainable(false);
  a.set_trainable(true);
  b.set_trainable(true);
  const TokenBatch batch =
      make_batch(TaskKind::CausalLM, std::vector<std::vector<std::int32_t>>{{1, 2, 3, 4, 5, 6}, {7, 8, 9, 10, 11, 16}});
  DistillConfig cfg;
  cfg.mode = DistillMode::FT;
  cfg.layer_map = map;
  Rng r1(4), r2(4);
  stage2_objective(cfg, batch, Stage2Inputs<float>{&teacher, &a}, &r1).total.backward();
  task_loss(b, batch, &r2).backward();
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto ga = pa[i].second.grad(), gb = pb[i].second.grad();
    if (!std::equal(ga.begin(), ga.end(), gb.begin(), gb.end())) return false;
  }
  return true;
}

struct LmResults {
  bool ran = false;
  double seconds = 0.0;
  std::vector<double> kd, ted, lwd;
  std::string teacher_hash_before, teacher_hash_after;
  bool stage1_backbone_same = true;
  bool stage2_teacher_same = true;
};

LmResults run_toy_lm(const fs::path& root) {
  LmResults r;
  const auto t0 = Clock::now();
  if (ted("train-teacher", opts("toy-lm.ini", root)) != 0) return r;
  r.teacher_hash_before = sha256_file(root / "teacher" / "model.ckpt");
  for (std::uint64_t s : {1, 2, 3}) {
    CommandOptions o = opts("toy-lm.ini", root);
    o.seed = s;
    if (ted("stage1", o) != 0) return r;
    r.stage1_backbone_same = r.stage1_backbone_same && manifest(root / ("seed-" + std::to_string(s)) / "stage1")
                                                           .value("backbone_hash_unchanged", false);
    for (const char* mode : {"kd", "ted"}) {
      o.mode = mode;
      if (ted("distill", o) != 0) return r;
      const fs::path d = root / ("seed-" + std::to_string(s)) / ("distill-" + std::string(mode));
      r.stage2_teacher_same = r.stage2_teacher_same && manifest(d).value("teacher_hash_unchanged", false);
      (std::string(mode) == "kd" ? r.kd : r.ted).push_back(final_value(d));
    }
  }
  r.seconds = seconds_since(t0);
  for (std::uint64_t s : {1, 2, 3}) {
    CommandOptions o = opts("toy-lm.ini", root);
    o.seed = s;
    o.mode = "lwd";
    if (ted("distill", o) != 0) return r;
    r.lwd.push_back(final_value(root / ("seed-" + std::to_string(s)) / "distill-lwd"));
  }
  r.teacher_hash_after = sha256_file(root / "teacher" / "model.ckpt");
  r.ran = true;
  return r;
}

Verdict criterion4(const LmResults& lm) {
  Verdict v;
  v.check(lm.ran, "toy-lm pipeline did not complete");
  v.check(!lm.teacher_hash_before.empty() && lm.teacher_hash_before == lm.teacher_hash_after,
          "teacher checkpoint hash changed across Stage I and Stage II");
  v.check(lm.stage1_backbone_same, "a Stage I run reported a changed backbone");
  v.check(lm.stage2_teacher_same, "a Stage II run reported a changed teacher");
  v.check(ft_gradient_bit_exact(), "FT Stage II gradient differs from plain fine-tuning");
  v.note("teacher sha256 " + lm.teacher_hash_before.substr(0, 12) + " before and after");
  return v;
}

Verdict criterion5(const LmResults& lm) {
  Verdict v;
  v.check(lm.ran && lm.kd.size() == 3 && lm.ted.size() == 3, "toy-lm runs missing");
  if (!v.pass) return v;
  const double V = 17.0;
  const double kd = median(lm.kd), td = median(lm.ted);
  v.check(td <= kd, "median TED ppl " + fmt(td, 8) + " > median KD ppl " + fmt(kd, 8));
  v.check(td < 0.5 * V && kd < 0.5 * V, "perplexity not below V/2 = " + fmt(0.5 * V));
  v.check(lm.seconds <= 900.0, "toy-lm pipeline took " + fmt(lm.seconds) + " s");
  std::string per_seed;
  for (std::size_t i = 0; i < 3; ++i) per_seed += " [" + fmt(lm.kd[i], 7) + " vs " + fmt(lm.ted[i], 7) + "]";
  v.note("median KD " + fmt(kd, 8) + ", median TED " + fmt(td, 8) + ", per seed (KD vs TED)" + per_seed + ", " +
         fmt(lm.seconds, 4) + " s");
  return v;
}

Verdict criterion6(const LmResults& lm, const fs::path& root) {
  Verdict v;
  v.check(lm.ran && lm.lwd.size() == 3, "toy-lm LWD runs missing");
  if (!v.pass) return v;
  CommandOptions c;
  std::map<std::string, std::string> groups;
  for (const char* mode : {"ted", "lwd"}) {
    for (int s = 1; s <= 3; ++s) {
      groups[mode] += (root / ("seed-" + std::to_string(s)) / ("distill-" + std::string(mode))).string() + ",";
    }
  }
  c.runs = {groups["ted"], groups["lwd"]};
  c.out = root / "compare-ted-lwd";
  v.check(ted("compare", c) == 0, "compare failed");
  if (!v.pass) return v;

  // Every run must have logged at every interval.
  for (const char* mode : {"ted", "lwd"}) {
    for (int s = 1; s <= 3; ++s) {
      const fs::path d = root / ("seed-" + std::to_string(s)) / ("distill-" + std::string(mode));
      const json m = manifest(d);
      const std::size_t total = m.at("total_steps").get<std::size_t>();
      const std::size_t every = 10;
      const auto rows = read_metrics(d / "metrics.csv");
      const std::size_t expected = (total + every - 1) / every;
      bool ok = rows.size() == expected;
      for (std::size_t i = 0; ok && i < rows.size(); ++i) {
        ok = static_cast<std::size_t>(rows[i][0]) == std::min(total, (i + 1) * every);
        for (double x : rows[i]) ok = ok && std::isfinite(x);
      }
      v.check(ok, std::string(mode) + " seed " + std::to_string(s) + " did not log every interval");
    }
  }
  for (const char* label : {"ted", "lwd"}) {
    const auto curve = csv(c.out / "curves" / (std::string(label) + ".csv"));
    const auto layers = csv(c.out / "layers" / (std::string(label) + ".csv"));
    v.check(curve.size() > 2 && layers.size() > 2, std::string(label) + " curves missing");
    bool finite = true;
    for (std::size_t i = 1; i < curve.size(); ++i) {
      for (const auto& cell : curve[i]) finite = finite && std::isfinite(std::stod(cell));
    }
    for (std::size_t i = 1; i < layers.size(); ++i) {
      for (const auto& cell : layers[i]) finite = finite && std::isfinite(std::stod(cell));
    }
    v.check(finite, std::string(label) + " curves contain non-finite values");
  }
  const auto diag = csv(c.out / "diagnostics.csv");
  std::map<std::string, std::vector<std::string>> by_label;
  for (std::size_t i = 1; i < diag.size(); ++i) by_label[diag[i][0]] = diag[i];
  v.check(by_label.count("ted") && by_label["ted"][3] == "true", "TED smoothed distillation term increases in the final half");
  if (by_label.count("ted") && by_label.count("lwd")) {
    const double t = std::stod(by_label["ted"][1]), l = std::stod(by_label["lwd"][1]);
    v.note("mean distillation term TED " + fmt(t, 4) + " vs LWD " + fmt(l, 4) + " (" + (t < l ? "TED lower" : "LWD lower") +
           "), LWD final-half non-increasing: " + by_label["lwd"][3]);
  }
  return v;
}

Verdict criterion7(const fs::path& root) {
  Verdict v;
  const auto t0 = Clock::now();
  const fs::path cls = root / "toy-cls", parity = root / "toy-cls-parity";
  CommandOptions base = opts("toy-cls.ini", cls);
  base.seed = 1;
  v.check(ted("train-teacher", opts("toy-cls.ini", cls)) == 0, "toy-cls teacher");
  v.check(ted("stage1", base) == 0, "toy-cls stage1");
  if (!v.pass) return v;
  const std::string teacher_hash = sha256_file(cls / "teacher" / "model.ckpt");
  const fs::path s1 = cls / "seed-1" / "stage1";
  const std::string tf_hash = sha256_file(s1 / "teacher_filters.ckpt");

  std::vector<fs::path> runs;
  auto distill = [&](CommandOptions o, const std::string& label) {
    const int rc = ted("distill", o);
    v.check(rc == 0, label + " exited with " + std::to_string(rc));
    const fs::path d = cls / "seed-1" / ("distill-" + label);
    const json m = manifest(d);
    v.check(m.value("complete", false), label + " is not complete");
    v.check(m.value("teacher_hash_unchanged", false) && m.value("teacher_filters_hash_unchanged", false),
            label + " changed a frozen component");
    runs.push_back(d);
  };

  std::size_t modes = 0;
  for (const char* tf : {"trained", "none"}) {
    for (const char* sf : {"trained", "random", "none"}) {
      CommandOptions o = base;
      o.mode = "ted";
      o.tag = std::string("abl-") + tf + "-" + sf;
      o.overrides = {std::string("distill.teacher_filters=") + tf, std::string("distill.student_filters=") + sf};
      distill(o, "ted-" + o.tag);
      const json m = manifest(runs.back());
      v.check(m.value("teacher_filters", "") == tf && m.value("student_filters", "") == sf,
              o.tag + " manifest does not record its filter init");
      ++modes;
    }
  }

  CommandOptions kl = base;
  kl.mode = "ted";
  kl.tag = "kl";
  kl.overrides = {"distill.ted_variant=kl"};
  distill(kl, "ted-kl");
  v.check(manifest(runs.back()).value("ted_variant", "") == "kl", "KL run does not record its variant");

  // Filters trained on the majority task, loaded for the parity task.
  CommandOptions p = opts("toy-cls-parity.ini", parity);
  v.check(ted("train-teacher", p) == 0, "parity teacher");
  p.seed = 1;
  p.tag = "from-majority";
  p.filters_from = s1;
  v.check(ted("stage1", p) == 0, "cross-task stage1");
  const json xm = manifest(parity / "seed-1" / "stage1-from-majority");
  v.check(xm.value("source_task", "") == "toy-cls-majority", "cross-task filters do not record their source task");
  CommandOptions pd = opts("toy-cls-parity.ini", parity);
  pd.seed = 1;
  pd.mode = "ted";
  pd.tag = "xtask";
  pd.stage1_tag = "from-majority";
  v.check(ted("distill", pd) == 0, "cross-task distill");
  const json pm = manifest(parity / "seed-1" / "distill-ted-xtask");
  v.check(pm.value("complete", false) && pm.value("teacher_hash_unchanged", false), "cross-task run incomplete");
  runs.push_back(parity / "seed-1" / "distill-ted-xtask");

  CommandOptions sw = base;
  sw.mode = "ted";
  sw.sweep = true;
  v.check(ted("distill", sw) == 0, "alpha2 sweep");
  const auto rows = csv(cls / "seed-1" / "sweep-ted.csv");
  v.check(rows.size() == 4, "sweep table has " + std::to_string(rows.size() ? rows.size() - 1 : 0) + " rows, want 3");
  for (const char* a2 : {"0.01", "0.1", "1"}) runs.push_back(cls / "seed-1" / ("distill-ted-a2_" + std::string(a2)));

  std::vector<std::string> hashes;
  for (const auto& d : runs) hashes.push_back(sha256_file(d / "manifest.json"));
  std::sort(hashes.begin(), hashes.end());
  v.check(std::adjacent_find(hashes.begin(), hashes.end()) == hashes.end(), "two runs share a manifest");
  v.check(sha256_file(cls / "teacher" / "model.ckpt") == teacher_hash, "toy-cls teacher checkpoint changed");
  v.check(sha256_file(s1 / "teacher_filters.ckpt") == tf_hash, "toy-cls teacher filters changed");
  v.note(std::to_string(modes) + " filter-init modes, KL, cross-task and a " + std::to_string(rows.size() - 1) +
         "-value sweep; " + std::to_string(runs.size()) + " distinct runs in " + fmt(seconds_since(t0), 4) + " s");
  return v;
}

Verdict criterion8(const fs::path& root) {
  Verdict v;
  const std::vector<std::string> small{"optim.stage2.epochs=1", "task.num_samples=400"};
  auto run_once = [&](const fs::path& r, std::size_t stop_after, bool resume) {
    CommandOptions o = opts("toy-cls.ini", r);
    o.overrides = small;
    o.seed = 1;
    o.mode = "ted";
    o.stop_after = stop_after;
    o.resume = resume;
    return ted("distill", o);
  };
  for (const char* name : {"a", "b", "c"}) {
    CommandOptions t = opts("toy-cls.ini", root / name);
    t.overrides = small;
    t.overrides.push_back("optim.teacher.epochs=1");
    v.check(ted("train-teacher", t) == 0, std::string("teacher ") + name);
    t.seed = 1;
    v.check(ted("stage1", t) == 0, std::string("stage1 ") + name);
  }
  if (!v.pass) return v;
  v.check(run_once(root / "a", 0, false) == 0 && run_once(root / "b", 0, false) == 0, "uninterrupted runs");
  v.check(run_once(root / "c", 7, false) == 0, "interrupted run");
  const fs::path tail = fs::path("seed-1") / "distill-ted";
  v.check(!manifest(root / "c" / tail).value("complete", true), "interrupted run claims completion");
  v.check(run_once(root / "c", 0, true) == 0, "resumed run");
  if (!v.pass) return v;
  for (const char* f : {"metrics.csv", "layers.csv", "student.ckpt"}) {
    v.check(slurp(root / "a" / tail / f) == slurp(root / "b" / tail / f), std::string(f) + " differs between identical runs");
    v.check(slurp(root / "a" / tail / f) == slurp(root / "c" / tail / f), std::string(f) + " differs after resume");
  }
  v.check(slurp(root / "a" / "teacher" / "metrics.csv") == slurp(root / "b" / "teacher" / "metrics.csv"),
          "teacher metrics differ between identical runs");
  v.note("metrics.csv sha256 " + sha256_file(root / "a" / tail / "metrics.csv").substr(0, 12) +
         " for repeated and resumed runs");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <configs-dir> [scratch-dir]\n";
    return 2;
  }
  g_configs = argv[1];
  g_scratch = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "ted_acceptance";
  fs::remove_all(g_scratch);
  fs::create_directories(g_scratch);

  std::vector<std::pair<int, std::function<Verdict()>>> plan;
  LmResults lm;
  plan.emplace_back(1, criterion1);
  plan.emplace_back(2, criterion2);
  plan.emplace_back(3, criterion3);
  plan.emplace_back(4, [&] {
    lm = run_toy_lm(g_scratch / "toy-lm");
    return criterion4(lm);
  });
  plan.emplace_back(5, [&] { return criterion5(lm); });
  plan.emplace_back(6, [&] { return criterion6(lm, g_scratch / "toy-lm"); });
  plan.emplace_back(7, [&] { return criterion7(g_scratch); });
  plan.emplace_back(8, [&] { return criterion8(g_scratch / "determinism"); });

  std::vector<std::string> lines;
  bool all = true;
  for (auto& [n, fn] : plan) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.check(false, std::string("exception: ") + e.what());
    }
    std::string line = "criterion " + std::to_string(n) + ": " + (v.pass ? "PASS" : "FAIL");
    for (const auto& s : v.notes) line += " | " + s;
    std::cout << line << std::endl;
    lines.push_back(line);
    all = all && v.pass;
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l.substr(0, l.find(" | ")) << "\n";
  return all ? 0 : 1;
}
