// SPDX-License-Identifier: Apache-2.0
#include "ted/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ted/config.hpp"
#include "ted/distill.hpp"
#include "ted/errors.hpp"
#include "ted/filters.hpp"
#include "ted/hash.hpp"
#include "ted/model.hpp"
#include "ted/trainer.hpp"

namespace ted {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Model = TransformerModel<float>;
using Bank = FilterBank<float>;

namespace {

constexpr std::uint64_t kStudentInitTag = 0x53545544;
constexpr std::uint64_t kTeacherFilterTag = 0x54464c54;
constexpr std::uint64_t kStudentFilterTag = 0x53464c54;
constexpr std::uint64_t kRandomFilterTag = 0x52464c54;
constexpr std::uint64_t kProjectionTag = 0x50524f4a;
constexpr std::uint64_t kFinetuneTag = 0x46494e45;

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string file_hash(const fs::path& p) { return sha256_file(p); }

json read_manifest(const fs::path& dir, bool require_complete = true) {
  const fs::path p = dir / "manifest.json";
  std::ifstream in(p);
  if (!in) throw ArtifactError("no manifest in " + dir.string());
  json m;
  try {
    in >> m;
  } catch (const std::exception& e) {
    throw ArtifactError("unreadable manifest " + p.string() + ": " + e.what());
  }
  if (require_complete && !m.value("complete", false)) throw ArtifactError("run " + dir.string() + " is not complete");
  return m;
}

void write_manifest(const fs::path& dir, const json& m) {
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw ArtifactError("cannot write manifest in " + dir.string());
  out << m.dump(2) << '\n';
}

/// Prepares a run directory. A complete run is never overwritten without --force.
void begin_run(const fs::path& dir, const CommandOptions& opt) {
  if (fs::exists(dir / "manifest.json")) {
    const json m = read_manifest(dir, false);
    if (m.value("complete", false) && !opt.force) {
      throw ArtifactError("refusing to overwrite complete run " + dir.string() + " (use --force)");
    }
  }
  if (!opt.resume && fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + p.string());
  out << text;
}

json parent_entry(const fs::path& p) {
  if (!fs::exists(p)) throw ArtifactError("missing artifact " + p.string());
  return {{"path", fs::absolute(p).lexically_normal().string()}, {"sha256", file_hash(p)}};
}

json base_manifest(const std::string& command, const ExperimentConfig& cfg) {
  return {{"command", command},
          {"config_hash", cfg.hash()},
          {"task", cfg.task.canonical()},
          {"task_name", cfg.task.name},
          {"task_hash", sha256_hex(cfg.task.canonical())},
          {"complete", false}};
}

json metrics_json(const EvalMetrics& m) {
  return {{"metric", m.metric}, {"value", m.value}, {"mean_loss", m.mean_loss}, {"count", m.count}};
}

struct Context {
  ExperimentConfig cfg;
  fs::path root;
  DatasetSplit data;
};

Context open_context(const CommandOptions& opt) {
  if (opt.config.empty()) throw ConfigError("--config is required");
  Context c{ExperimentConfig::load(opt.config, opt.overrides), {}, {}};
  c.root = opt.out.empty() ? fs::path(c.cfg.output_dir) : opt.out;
  c.data = c.cfg.task.generate();
  return c;
}

std::vector<std::uint64_t> seeds_for(const CommandOptions& opt, const ExperimentConfig& cfg) {
  if (opt.seed) return {*opt.seed};
  return cfg.seeds;
}

fs::path seed_dir(const fs::path& root, std::uint64_t s) { return root / ("seed-" + std::to_string(s)); }

fs::path stage1_dir(const fs::path& root, std::uint64_t s, const std::string& tag) {
  return seed_dir(root, s) / (tag.empty() ? "stage1" : "stage1-" + tag);
}

LoopOptions loop_options(const PhaseOptim& po, Stage stage, std::uint64_t seed, const fs::path& dir,
                         const std::string& prefix, const CommandOptions& opt, const ExperimentConfig& cfg) {
  LoopOptions lo;
  lo.stage = stage;
  lo.hyper = po.hyper;
  lo.hyper.seed = seed;
  lo.log_every = po.log_every;
  lo.checkpoint_every = po.checkpoint_every;
  lo.metrics_path = dir / (prefix + "metrics.csv");
  lo.layers_path = dir / (prefix + "layers.csv");
  lo.state_path = dir / (prefix + "state.ckpt");
  lo.resume = opt.resume && fs::exists(lo.state_path);
  lo.stop_after = opt.stop_after;
  lo.record_wall_time = cfg.record_wall_time;
  return lo;
}

NamedParams<float> prefixed(const std::string& prefix, const NamedParams<float>& ps) {
  NamedParams<float> out;
  for (const auto& [n, t] : ps) out.emplace_back(prefix + n, t);
  return out;
}

Model load_teacher(const fs::path& root, json* parent) {
  const fs::path dir = root / "teacher";
  if (!fs::exists(dir / "manifest.json")) throw ArtifactError("no trained teacher under " + dir.string());
  read_manifest(dir);
  const fs::path ck = dir / "model.ckpt";
  if (parent) *parent = parent_entry(ck);
  return Model::load(ck);
}

Model make_student_init(const ExperimentConfig& cfg, const Model& teacher, std::uint64_t seed) {
  if (cfg.student_init == StudentInit::FromTeacher) {
    return init_student_from_teacher(teacher, cfg.student, cfg.distill.layer_map);
  }
  return Model(cfg.student, derive_seed(seed, kStudentInitTag));
}

Bank plain_bank(const ExperimentConfig& cfg, BankOwner owner, FilterArch arch, std::uint64_t seed) {
  FilterSpec spec = cfg.filter_spec(owner == BankOwner::Student, seed);
  spec.arch = arch;
  spec.with_head = false;
  return build_filter_bank<float>(spec, owner, cfg.distill.layer_map);
}

std::string model_hash(const Model& m) { return parameter_hash(m); }

std::string bank_hash(const Bank& b) {
  if (b.named_parameters().empty()) return "empty";
  return sha256_hex(b.to_checkpoint().serialize());
}

/// Trains `bank` on a frozen backbone with the summed per-layer task loss.
LoopResult train_bank(const ExperimentConfig& cfg, const CommandOptions& opt, const Model& backbone, Bank& bank,
                      std::uint64_t seed, const fs::path& dir, const std::string& prefix, const TaskDataset& train) {
  bank.set_trainable(true);
  LoopOptions lo = loop_options(cfg.optim_stage1, Stage::StageI, seed, dir, prefix, opt, cfg);
  lo.resume = false;
  lo.stop_after = 0;
  const auto params = prefixed(prefix, bank.named_parameters());
  auto step = [&](const TokenBatch& batch, Rng&) {
    StepTerms<float> t;
    t.total = stage1_loss(backbone, bank, batch, &t.per_layer);
    t.task = t.total.item();
    return t;
  };
  LoopResult r = train_loop<float>(lo, train, params, step);
  bank.set_trainable(false);
  return r;
}

int train_teacher_impl(const CommandOptions& opt, std::ostream& out) {
  Context ctx = open_context(opt);
  const auto& cfg = ctx.cfg;
  const fs::path dir = ctx.root / "teacher";
  begin_run(dir, opt);
  write_text(dir / "config.ini", cfg.resolved());
  Model teacher(cfg.teacher, cfg.teacher_seed);
  const LoopOptions lo = loop_options(cfg.optim_teacher, Stage::Teacher, cfg.teacher_seed, dir, "", opt, cfg);
  auto step = [&](const TokenBatch& batch, Rng& rng) {
    StepTerms<float> t;
    t.total = task_loss(teacher, batch, &rng);
    t.task = t.total.item();
    return t;
  };
  json m = base_manifest("train-teacher", cfg);
  m["seed"] = cfg.teacher_seed;
  m["parameters"] = teacher.parameter_count();
  const LoopResult r = train_loop<float>(lo, ctx.data.first, teacher.named_parameters(), step);
  m["steps"] = r.steps_done;
  m["total_steps"] = r.total_steps;
  if (!r.completed) {
    write_manifest(dir, m);
    out << "teacher: stopped at step " << r.steps_done << " of " << r.total_steps << "\n";
    return kExitOk;
  }
  teacher.set_trainable(false);
  teacher.save(dir / "model.ckpt");
  const EvalMetrics ev = evaluate(teacher, ctx.data.second, cfg.eval_batch_size);
  m["final_metrics"] = metrics_json(ev);
  m["outputs"] = {{"model.ckpt", file_hash(dir / "model.ckpt")}, {"metrics.csv", file_hash(dir / "metrics.csv")}};
  m["complete"] = true;
  fs::remove(lo.state_path);
  write_manifest(dir, m);
  out << "teacher: " << ev.metric << " " << ev.value << " after " << r.total_steps << " steps\n";
  return kExitOk;
}

int stage1_impl(const CommandOptions& opt, std::ostream& out) {
  if (opt.resume) throw ConfigError("--resume applies to train-teacher and distill only");
  Context ctx = open_context(opt);
  const auto& cfg = ctx.cfg;
  const auto& map = cfg.distill.layer_map;
  const std::size_t K = map.student_depth();
  json teacher_parent;
  const Model teacher = load_teacher(ctx.root, &teacher_parent);
  const std::string teacher_before = model_hash(teacher);

  for (const std::uint64_t s : seeds_for(opt, cfg)) {
    const fs::path dir = stage1_dir(ctx.root, s, opt.tag);
    begin_run(dir, opt);
    write_text(dir / "config.ini", cfg.resolved());
    json m = base_manifest("stage1", cfg);
    m["seed"] = s;
    m["tag"] = opt.tag;
    m["parents"] = {{"teacher", teacher_parent}};

    Model student = make_student_init(cfg, teacher, s);
    if (cfg.finetune_before_stage1) {
      student.set_trainable(true);
      LoopOptions lo = loop_options(cfg.optim_finetune, Stage::Finetune, derive_seed(s, kFinetuneTag), dir,
                                    "finetune_", opt, cfg);
      lo.resume = false;
      lo.stop_after = 0;
      auto step = [&](const TokenBatch& batch, Rng& rng) {
        StepTerms<float> t;
        t.total = task_loss(student, batch, &rng);
        t.task = t.total.item();
        return t;
      };
      train_loop<float>(lo, ctx.data.first, student.named_parameters(), step);
      m["finetuned"] = true;
    }
    student.set_trainable(false);
    student.save(dir / "student_init.ckpt");
    const std::string student_before = model_hash(student);

    Bank tb, sb;
    if (!opt.filters_from.empty()) {
      const json src = read_manifest(opt.filters_from);
      if (src.value("command", "") != "stage1") throw ArtifactError(opt.filters_from.string() + " is not a stage1 run");
      tb = Bank::from_checkpoint(Checkpoint::load(opt.filters_from / "teacher_filters.ckpt"));
      sb = Bank::from_checkpoint(Checkpoint::load(opt.filters_from / "student_filters.ckpt"));
      check_bank_dims(tb, K, cfg.teacher.hidden_dim, cfg.teacher.hidden_dim);
      check_bank_dims(sb, K, cfg.student.hidden_dim, cfg.teacher.hidden_dim);
      if (tb.source_layers != map.indices()) throw ArtifactError("foreign teacher filters read different layers");
      m["filters_from"] = fs::absolute(opt.filters_from).lexically_normal().string();
      m["parents"]["foreign_teacher_filters"] = parent_entry(opt.filters_from / "teacher_filters.ckpt");
      m["parents"]["foreign_student_filters"] = parent_entry(opt.filters_from / "student_filters.ckpt");
      out << "stage1 seed " << s << ": loaded filters trained on '" << tb.source_task << "'\n";
    } else {
      tb = build_filter_bank<float>(cfg.filter_spec(false, derive_seed(s, kTeacherFilterTag)), BankOwner::Teacher, map,
                                    &teacher);
      tb.source_task = cfg.task.name;
      const LoopResult rt = train_bank(cfg, opt, teacher, tb, s, dir, "teacher_filters_", ctx.data.first);
      m["teacher_filters_loss"] = {{"first", rt.first_logged_task}, {"last", rt.last_logged_task}};
      if (cfg.student_filter_source == StudentFilterSource::CopyTeacher) {
        sb = tb.clone();
        sb.owner = BankOwner::Student;
        for (std::size_t k = 0; k < K; ++k) sb.source_layers[k] = k + 1;
        m["student_filters_source"] = "copy_teacher";
      } else {
        sb = build_filter_bank<float>(cfg.filter_spec(true, derive_seed(s, kStudentFilterTag)), BankOwner::Student, map,
                                      &student);
        sb.source_task = cfg.task.name;
        const LoopResult rs = train_bank(cfg, opt, student, sb, s, dir, "student_filters_", ctx.data.first);
        m["student_filters_loss"] = {{"first", rs.first_logged_task}, {"last", rs.last_logged_task}};
        m["student_filters_source"] = "train";
      }
    }
    tb.owner = BankOwner::Teacher;
    tb.set_trainable(false);
    sb.set_trainable(false);
    tb.to_checkpoint().save(dir / "teacher_filters.ckpt");
    sb.to_checkpoint().save(dir / "student_filters.ckpt");

    const bool teacher_same = model_hash(teacher) == teacher_before;
    const bool student_same = model_hash(student) == student_before;
    if (!teacher_same || !student_same) throw ContractError("stage1 modified a frozen backbone");
    m["backbone_hash_unchanged"] = true;
    m["source_task"] = tb.source_task;
    m["filter_parameters"] = tb.parameter_count();
    m["teacher_parameters"] = teacher.parameter_count();
    m["outputs"] = {{"student_init.ckpt", file_hash(dir / "student_init.ckpt")},
                    {"teacher_filters.ckpt", file_hash(dir / "teacher_filters.ckpt")},
                    {"student_filters.ckpt", file_hash(dir / "student_filters.ckpt")}};
    m["complete"] = true;
    write_manifest(dir, m);
    out << "stage1 seed " << s << ": filters saved to " << dir.string() << "\n";
  }
  return kExitOk;
}

struct DistillOutcome {
  EvalMetrics eval;
  fs::path dir;
  bool completed = false;
};

DistillOutcome distill_one(const Context& ctx, const CommandOptions& opt, DistillMode mode, std::uint64_t s,
                           const std::string& label, std::optional<double> alpha2, std::ostream& out) {
  const auto& cfg = ctx.cfg;
  const auto& map = cfg.distill.layer_map;
  const std::size_t K = map.student_depth();
  const fs::path dir = seed_dir(ctx.root, s) / ("distill-" + label);
  const fs::path s1 = stage1_dir(ctx.root, s, opt.stage1_tag);
  begin_run(dir, opt);
  write_text(dir / "config.ini", ctx.cfg.resolved());

  DistillConfig dcfg = cfg.distill;
  dcfg.mode = mode;
  if (alpha2) dcfg.alpha2 = *alpha2;
  const DistillConfig eff = dcfg.normalized();

  json m = base_manifest("distill", cfg);
  m["seed"] = s;
  m["mode"] = to_string(mode);
  m["label"] = label;
  m["alpha1"] = eff.alpha1;
  m["alpha2"] = eff.alpha2;
  m["temperature"] = eff.temperature;
  m["ted_variant"] = to_string(eff.variant);
  m["teacher_filters"] = to_string(eff.teacher_filters);
  m["student_filters"] = to_string(eff.student_filters);
  m["layer_map"] = map.to_string();

  json teacher_parent;
  const Model teacher = load_teacher(ctx.root, &teacher_parent);
  m["parents"] = {{"teacher", teacher_parent}};
  const std::string teacher_before = model_hash(teacher);

  Model student;
  if (fs::exists(s1 / "student_init.ckpt")) {
    read_manifest(s1);
    student = Model::load(s1 / "student_init.ckpt");
    m["parents"]["student_init"] = parent_entry(s1 / "student_init.ckpt");
  } else if (cfg.finetune_before_stage1) {
    throw ArtifactError("student is fine-tuned during stage1; run stage1 for seed " + std::to_string(s) + " first");
  } else {
    student = make_student_init(cfg, teacher, s);
  }
  student.set_trainable(true);

  Bank tb, sb;
  Projections<float> proj;
  NamedParams<float> trainable = prefixed("student.", student.named_parameters());
  if (mode == DistillMode::TED) {
    if (eff.teacher_filters == TeacherFilterInit::Trained) {
      if (!fs::exists(s1 / "teacher_filters.ckpt")) {
        throw ArtifactError("ted needs trained teacher filters; run stage1 (missing " + s1.string() + ")");
      }
      read_manifest(s1);
      tb = Bank::from_checkpoint(Checkpoint::load(s1 / "teacher_filters.ckpt"));
      m["parents"]["teacher_filters"] = parent_entry(s1 / "teacher_filters.ckpt");
    } else {
      tb = plain_bank(cfg, BankOwner::Teacher, FilterArch::Identity, 0);
    }
    switch (eff.student_filters) {
      case StudentFilterInit::Trained:
        if (!fs::exists(s1 / "student_filters.ckpt")) {
          throw ArtifactError("ted needs trained student filters; run stage1 (missing " + s1.string() + ")");
        }
        sb = Bank::from_checkpoint(Checkpoint::load(s1 / "student_filters.ckpt"));
        m["parents"]["student_filters"] = parent_entry(s1 / "student_filters.ckpt");
        break;
      case StudentFilterInit::Random:
        sb = build_filter_bank<float>(cfg.filter_spec(true, derive_seed(s, kRandomFilterTag)), BankOwner::Student, map,
                                      &student);
        break;
      case StudentFilterInit::None:
        sb = plain_bank(cfg, BankOwner::Student,
                        cfg.student.hidden_dim == cfg.teacher.hidden_dim ? FilterArch::Identity
                                                                          : FilterArch::LinearProjection,
                        derive_seed(s, kRandomFilterTag));
        break;
    }
    check_bank_dims(tb, K, cfg.teacher.hidden_dim, cfg.teacher.hidden_dim);
    check_bank_dims(sb, K, cfg.student.hidden_dim, cfg.teacher.hidden_dim);
    if (eff.variant == TedVariant::MSE) {
      tb.detach_heads();
      sb.detach_heads();
    } else if (!tb.has_heads() || !sb.has_heads()) {
      throw ArtifactError("kl variant needs filters that still carry their task heads");
    }
    tb.set_trainable(false);
    sb.set_trainable(true);
    for (auto& p : prefixed("sfilter.", sb.named_parameters())) trainable.push_back(p);
  } else if (mode == DistillMode::LWD) {
    proj = Projections<float>::init(K, cfg.student.hidden_dim, cfg.teacher.hidden_dim, derive_seed(s, kProjectionTag));
    for (auto& p : proj.named_parameters()) trainable.push_back(p);
  }
  const std::string tb_before = bank_hash(tb);

  Stage2Inputs<float> in{&teacher, &student, mode == DistillMode::TED ? &tb : nullptr,
                         mode == DistillMode::TED ? &sb : nullptr, mode == DistillMode::LWD ? &proj : nullptr};
  auto step = [&](const TokenBatch& batch, Rng& rng) {
    Stage2Terms<float> t2 = stage2_objective(dcfg, batch, in, &rng);
    StepTerms<float> t;
    t.total = t2.total;
    t.task = t2.task;
    t.pred = t2.pred;
    t.distill = t2.distill;
    t.per_layer = std::move(t2.per_layer);
    return t;
  };
  const LoopOptions lo = loop_options(cfg.optim_stage2, Stage::StageII, s, dir, "", opt, cfg);
  const LoopResult r = train_loop<float>(lo, ctx.data.first, trainable, step);
  m["steps"] = r.steps_done;
  m["total_steps"] = r.total_steps;
  DistillOutcome outcome;
  outcome.dir = dir;
  if (!r.completed) {
    write_manifest(dir, m);
    out << "distill " << label << " seed " << s << ": stopped at step " << r.steps_done << "\n";
    return outcome;
  }

  if (model_hash(teacher) != teacher_before || bank_hash(tb) != tb_before) {
    throw ContractError("distillation modified the teacher or its filters");
  }
  m["teacher_hash_unchanged"] = true;
  m["teacher_filters_hash_unchanged"] = true;
  student.set_trainable(false);
  student.save(dir / "student.ckpt");
  m["outputs"] = {{"student.ckpt", file_hash(dir / "student.ckpt")}, {"metrics.csv", file_hash(dir / "metrics.csv")}};
  if (mode == DistillMode::TED && !sb.named_parameters().empty()) {
    sb.set_trainable(false);
    sb.to_checkpoint().save(dir / "student_filters.ckpt");
    m["outputs"]["student_filters.ckpt"] = file_hash(dir / "student_filters.ckpt");
  }
  outcome.eval = evaluate(student, ctx.data.second, cfg.eval_batch_size);
  outcome.completed = true;
  m["final_metrics"] = metrics_json(outcome.eval);
  m["complete"] = true;
  fs::remove(lo.state_path);
  write_manifest(dir, m);
  out << "distill " << label << " seed " << s << ": " << outcome.eval.metric << " " << outcome.eval.value << "\n";
  return outcome;
}

int distill_impl(const CommandOptions& opt, std::ostream& out) {
  DistillMode mode;
  try {
    mode = parse_distill_mode(opt.mode);
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  Context ctx = open_context(opt);
  const std::string base = to_string(mode) + (opt.tag.empty() ? "" : "-" + opt.tag);
  for (const std::uint64_t s : seeds_for(opt, ctx.cfg)) {
    if (!opt.sweep) {
      distill_one(ctx, opt, mode, s, base, std::nullopt, out);
      continue;
    }
    if (ctx.cfg.alpha2_sweep.empty()) throw ConfigError("--sweep needs [distill] alpha2_sweep");
    std::string rows = "alpha2,metric,value,mean_loss\n";
    for (const double a2 : ctx.cfg.alpha2_sweep) {
      const DistillOutcome o = distill_one(ctx, opt, mode, s, base + "-a2_" + short_num(a2), a2, out);
      if (!o.completed) throw ContractError("sweep runs cannot be stopped early");
      char buf[160];
      std::snprintf(buf, sizeof buf, "%.9g,%s,%.9g,%.9g\n", a2, o.eval.metric.c_str(), o.eval.value, o.eval.mean_loss);
      rows += buf;
    }
    write_text(seed_dir(ctx.root, s) / ("sweep-" + base + ".csv"), rows);
  }
  return kExitOk;
}

int eval_impl(const CommandOptions& opt, std::ostream& out) {
  if (opt.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  Context ctx = open_context(opt);
  if (!fs::exists(opt.checkpoint)) throw ArtifactError("no checkpoint at " + opt.checkpoint.string());
  const Model model = Model::load(opt.checkpoint);
  const ModelConfig& mc = model.config();
  const TaskSpec& t = ctx.cfg.task;
  const bool lm = t.kind == TaskKind::CausalLM;
  if (mc.vocab_size != t.vocab().size() || mc.max_seq_len < t.seq_len ||
      (mc.head == HeadKind::LanguageModel) != lm || (!lm && mc.num_classes != t.num_classes)) {
    throw ArtifactError("checkpoint does not fit task '" + t.name + "'");
  }
  if (opt.split != "test" && opt.split != "train") throw ConfigError("--split must be train or test");
  const TaskDataset& data = opt.split == "test" ? ctx.data.second : ctx.data.first;
  const EvalMetrics ev = evaluate(model, data, ctx.cfg.eval_batch_size);
  json j = metrics_json(ev);
  j["checkpoint"] = opt.checkpoint.string();
  j["checkpoint_sha256"] = file_hash(opt.checkpoint);
  j["split"] = opt.split;
  j["task"] = t.canonical();
  const fs::path dest = opt.out.empty() ? fs::path(opt.checkpoint.string() + ".eval.json") : opt.out;
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  write_text(dest, j.dump(2) + "\n");
  out << ev.metric << "=" << ev.value << " mean_loss=" << ev.mean_loss << " count=" << ev.count << "\n";
  return kExitOk;
}

void verify_chain(const fs::path& dir, const json& m) {
  if (m.contains("parents")) {
    for (const auto& [name, p] : m["parents"].items()) {
      const fs::path path = p.at("path").get<std::string>();
      if (!fs::exists(path) || file_hash(path) != p.at("sha256").get<std::string>()) {
        throw ArtifactError("manifest chain broken in " + dir.string() + ": parent '" + name + "' changed or missing");
      }
    }
  }
  if (m.contains("outputs")) {
    for (const auto& [name, h] : m["outputs"].items()) {
      if (!fs::exists(dir / name) || file_hash(dir / name) != h.get<std::string>()) {
        throw ArtifactError("manifest chain broken in " + dir.string() + ": output '" + name + "' changed or missing");
      }
    }
  }
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::pair<double, double> mean_var(const std::vector<double>& v) {
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  return {mu, var / static_cast<double>(v.size())};
}

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct Group {
  std::string label;
  std::vector<fs::path> dirs;
  std::vector<json> manifests;
};

int compare_impl(const CommandOptions& opt, std::ostream& out) {
  std::vector<Group> groups;
  std::size_t total_runs = 0;
  for (const auto& arg : opt.runs) {
    Group g;
    std::stringstream in(arg);
    std::string item;
    while (std::getline(in, item, ',')) {
      if (item.empty()) continue;
      g.dirs.emplace_back(item);
      g.manifests.push_back(read_manifest(item));
      verify_chain(item, g.manifests.back());
    }
    if (g.dirs.empty()) continue;
    total_runs += g.dirs.size();
    g.label = g.manifests.front().value("label", g.manifests.front().value("command", "run"));
    for (const auto& m : g.manifests) {
      if (m.value("label", g.label) != g.label) {
        throw MismatchError("runs grouped into one row have different labels (" + g.label + " vs " +
                            m.value("label", std::string("?")) + ")");
      }
    }
    groups.push_back(std::move(g));
  }
  if (total_runs < 2) throw ConfigError("compare needs at least two completed runs");
  const std::string task_hash = groups.front().manifests.front().at("task_hash");
  for (const auto& g : groups) {
    for (const auto& m : g.manifests) {
      if (m.at("task_hash") != task_hash) throw MismatchError("runs were trained on different tasks");
    }
  }
  std::map<std::string, int> seen;
  for (auto& g : groups) {
    if (++seen[g.label] > 1) g.label += "#" + std::to_string(seen[g.label]);
  }

  const fs::path dest = opt.out.empty() ? fs::path("compare") : opt.out;
  fs::create_directories(dest / "curves");
  fs::create_directories(dest / "layers");
  std::string table = "label,runs,seeds,metric,median,mean,delta_vs_first\n";
  std::string diag = "label,distill_mean,distill_var,final_half_nonincreasing,smooth_window\n";
  double first_median = 0.0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const Group& g = groups[gi];
    std::vector<double> values;
    std::string seeds, metric;
    for (const auto& m : g.manifests) {
      values.push_back(m.at("final_metrics").at("value").get<double>());
      metric = m.at("final_metrics").at("metric").get<std::string>();
      seeds += (seeds.empty() ? "" : " ") + std::to_string(m.value("seed", 0ull));
    }
    const double med = median(values);
    if (gi == 0) first_median = med;
    table += g.label + "," + std::to_string(g.dirs.size()) + "," + seeds + "," + metric + "," + g9(med) + "," +
             g9(mean_var(values).first) + "," + g9(med - first_median) + "\n";

    // Curves aligned on the steps every run logged.
    std::vector<std::map<long, std::vector<double>>> per_run;
    std::vector<std::string> header;
    for (const auto& d : g.dirs) {
      std::map<long, std::vector<double>> rows;
      for (auto& row : read_metrics(d / "metrics.csv", &header)) rows[static_cast<long>(row[0])] = row;
      per_run.push_back(std::move(rows));
    }
    std::vector<long> steps;
    for (const auto& [st, row] : per_run.front()) {
      if (std::all_of(per_run.begin(), per_run.end(), [&](const auto& r) { return r.count(st) > 0; })) steps.push_back(st);
    }
    std::string curve = "step,task_loss,pred_loss,distill_loss,per_layer_distill_mean,per_layer_distill_var\n";
    std::vector<double> distill_curve;
    for (long st : steps) {
      std::vector<double> task, pred, dist, plm;
      for (const auto& r : per_run) {
        const auto& row = r.at(st);
        task.push_back(row[2]);
        pred.push_back(row[3]);
        dist.push_back(row[4]);
        plm.push_back(row[5]);
      }
      const auto [mu, var] = mean_var(plm);
      curve += std::to_string(st) + "," + g9(median(task)) + "," + g9(median(pred)) + "," + g9(median(dist)) + "," +
               g9(mu) + "," + g9(var) + "\n";
      distill_curve.push_back(median(plm));
    }
    const std::string file = g.label;
    write_text(dest / "curves" / (file + ".csv"), curve);

    // Per-layer mean and variance across runs.
    std::vector<std::map<long, std::vector<double>>> layer_runs;
    std::size_t layer_cols = 0;
    for (const auto& d : g.dirs) {
      if (!fs::exists(d / "layers.csv")) continue;
      std::map<long, std::vector<double>> rows;
      std::vector<std::string> lh;
      for (auto& row : read_metrics(d / "layers.csv", &lh)) rows[static_cast<long>(row[0])] = row;
      layer_cols = lh.size() - 1;
      layer_runs.push_back(std::move(rows));
    }
    if (!layer_runs.empty() && layer_runs.size() == g.dirs.size()) {
      std::string lt = "step";
      for (std::size_t k = 1; k <= layer_cols; ++k) {
        lt += ",layer_" + std::to_string(k) + "_mean,layer_" + std::to_string(k) + "_var";
      }
      lt += "\n";
      for (long st : steps) {
        if (!std::all_of(layer_runs.begin(), layer_runs.end(), [&](const auto& r) { return r.count(st) > 0; })) continue;
        lt += std::to_string(st);
        for (std::size_t k = 1; k <= layer_cols; ++k) {
          std::vector<double> v;
          for (const auto& r : layer_runs) v.push_back(r.at(st)[k]);
          const auto [mu, var] = mean_var(v);
          lt += "," + g9(mu) + "," + g9(var);
        }
        lt += "\n";
      }
      write_text(dest / "layers" / (file + ".csv"), lt);
    }

    if (!distill_curve.empty()) {
      const std::size_t window = opt.smooth_window ? opt.smooth_window : std::max<std::size_t>(1, distill_curve.size() / 4);
      const std::vector<double> sm = smooth(distill_curve, window);
      bool nonincreasing = true;
      for (std::size_t i = sm.size() / 2 + 1; i < sm.size(); ++i) {
        if (sm[i] > sm[i - 1]) nonincreasing = false;
      }
      const auto [mu, var] = mean_var(distill_curve);
      diag += g.label + "," + g9(mu) + "," + g9(var) + "," + (nonincreasing ? "true" : "false") + "," +
              std::to_string(window) + "\n";
    }
    out << g.label << ": " << metric << " median " << g9(med) << " over " << g.dirs.size() << " run(s)\n";
  }
  write_text(dest / "compare.csv", table);
  write_text(dest / "diagnostics.csv", diag);
  out << "comparison written to " << dest.string() << "\n";
  return kExitOk;
}

}  // namespace

std::vector<double> smooth(const std::vector<double>& v, std::size_t window) {
  window = std::max<std::size_t>(1, std::min(window, v.size()));
  std::vector<double> out(v.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= window) acc -= v[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

int cmd_train_teacher(const CommandOptions& opt, std::ostream& out) { return train_teacher_impl(opt, out); }
int cmd_stage1(const CommandOptions& opt, std::ostream& out) { return stage1_impl(opt, out); }
int cmd_distill(const CommandOptions& opt, std::ostream& out) { return distill_impl(opt, out); }
int cmd_eval(const CommandOptions& opt, std::ostream& out) { return eval_impl(opt, out); }
int cmd_compare(const CommandOptions& opt, std::ostream& out) { return compare_impl(opt, out); }

int run_command(const std::string& name, const CommandOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    if (name == "train-teacher") return cmd_train_teacher(opt, out);
    if (name == "stage1") return cmd_stage1(opt, out);
    if (name == "distill") return cmd_distill(opt, out);
    if (name == "eval") return cmd_eval(opt, out);
    if (name == "compare") return cmd_compare(opt, out);
    err << "error: unknown command '" << name << "'\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArtifactError& e) {
    err << "artifact error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const UnsupportedError& e) {
    err << "artifact error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const MismatchError& e) {
    err << "comparison mismatch: " << e.what() << "\n";
    return kExitMismatch;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace ted
