// SPDX-License-Identifier: Apache-2.0
#include "ted/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "ted/errors.hpp"
#include "ted/hash.hpp"

namespace ted {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t to_size(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ParameterError("expected a non-negative integer, got '" + v + "'");
  }
  return std::stoull(v);
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ParameterError("expected a number, got '" + v + "'");
  return d;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParameterError("expected true/false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream in(v);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename Member>
void add_size(std::vector<Field>& f, const std::string& sec, const std::string& key, Member m) {
  f.push_back({sec, key, [m](ExperimentConfig& c, const std::string& v) { m(c) = to_size(v); },
               [m](const ExperimentConfig& c) { return std::to_string(m(const_cast<ExperimentConfig&>(c))); }});
}

template <typename Member>
void add_double(std::vector<Field>& f, const std::string& sec, const std::string& key, Member m) {
  f.push_back({sec, key, [m](ExperimentConfig& c, const std::string& v) { m(c) = to_double(v); },
               [m](const ExperimentConfig& c) { return fmt(m(const_cast<ExperimentConfig&>(c))); }});
}

template <typename Member>
void add_bool(std::vector<Field>& f, const std::string& sec, const std::string& key, Member m) {
  f.push_back({sec, key, [m](ExperimentConfig& c, const std::string& v) { m(c) = to_bool(v); },
               [m](const ExperimentConfig& c) { return m(const_cast<ExperimentConfig&>(c)) ? "true" : "false"; }});
}

void add_model(std::vector<Field>& f, const std::string& sec, ModelConfig ExperimentConfig::*mc) {
  add_size(f, sec, "depth", [mc](ExperimentConfig& c) -> std::size_t& { return (c.*mc).depth; });
  add_size(f, sec, "hidden_dim", [mc](ExperimentConfig& c) -> std::size_t& { return (c.*mc).hidden_dim; });
  add_size(f, sec, "head_count", [mc](ExperimentConfig& c) -> std::size_t& { return (c.*mc).head_count; });
  add_size(f, sec, "ffn_dim", [mc](ExperimentConfig& c) -> std::size_t& { return (c.*mc).ffn_dim; });
  add_double(f, sec, "dropout", [mc](ExperimentConfig& c) -> double& { return (c.*mc).dropout_rate; });
  add_bool(f, sec, "tie_embeddings", [mc](ExperimentConfig& c) -> bool& { return (c.*mc).tie_embeddings; });
}

void add_optim(std::vector<Field>& f, const std::string& sec, PhaseOptim ExperimentConfig::*po) {
  add_double(f, sec, "lr", [po](ExperimentConfig& c) -> double& { return (c.*po).hyper.base_lr; });
  add_double(f, sec, "warmup_ratio", [po](ExperimentConfig& c) -> double& { return (c.*po).hyper.warmup_ratio; });
  add_double(f, sec, "weight_decay", [po](ExperimentConfig& c) -> double& { return (c.*po).hyper.weight_decay; });
  add_double(f, sec, "beta1", [po](ExperimentConfig& c) -> double& { return (c.*po).hyper.beta1; });
  add_double(f, sec, "beta2", [po](ExperimentConfig& c) -> double& { return (c.*po).hyper.beta2; });
  add_double(f, sec, "epsilon", [po](ExperimentConfig& c) -> double& { return (c.*po).hyper.epsilon; });
  add_size(f, sec, "batch_size", [po](ExperimentConfig& c) -> std::size_t& { return (c.*po).hyper.batch_size; });
  add_size(f, sec, "epochs", [po](ExperimentConfig& c) -> std::size_t& { return (c.*po).hyper.epochs; });
  add_double(f, sec, "grad_clip", [po](ExperimentConfig& c) -> double& { return (c.*po).hyper.grad_clip; });
  add_size(f, sec, "log_every", [po](ExperimentConfig& c) -> std::size_t& { return (c.*po).log_every; });
  add_size(f, sec, "checkpoint_every", [po](ExperimentConfig& c) -> std::size_t& { return (c.*po).checkpoint_every; });
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back({"task", "kind",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "lm") c.task.kind = TaskKind::CausalLM;
                   else if (v == "cls") c.task.kind = TaskKind::Classification;
                   else throw ParameterError("task kind must be lm or cls, got '" + v + "'");
                 },
                 [](const ExperimentConfig& c) { return std::string(c.task.kind == TaskKind::CausalLM ? "lm" : "cls"); }});
    f.push_back({"task", "name", [](ExperimentConfig& c, const std::string& v) { c.task.name = v; },
                 [](const ExperimentConfig& c) { return c.task.name; }});
    add_size(f, "task", "seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.task.seed; });
    add_size(f, "task", "num_samples", [](ExperimentConfig& c) -> std::size_t& { return c.task.num_samples; });
    add_size(f, "task", "seq_len", [](ExperimentConfig& c) -> std::size_t& { return c.task.seq_len; });
    f.push_back({"task", "rule", [](ExperimentConfig& c, const std::string& v) { c.task.rule = parse_cls_rule(v); },
                 [](const ExperimentConfig& c) { return to_string(c.task.rule); }});
    add_size(f, "task", "num_classes", [](ExperimentConfig& c) -> std::size_t& { return c.task.num_classes; });
    add_double(f, "task", "test_fraction", [](ExperimentConfig& c) -> double& { return c.task.test_fraction; });

    add_model(f, "teacher", &ExperimentConfig::teacher);
    add_size(f, "teacher", "seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.teacher_seed; });
    add_model(f, "student", &ExperimentConfig::student);
    f.push_back({"student", "init",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "from_teacher") c.student_init = StudentInit::FromTeacher;
                   else if (v == "fresh") c.student_init = StudentInit::Fresh;
                   else throw ParameterError("student init must be from_teacher or fresh, got '" + v + "'");
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.student_init == StudentInit::FromTeacher ? "from_teacher" : "fresh");
                 }});
    add_bool(f, "student", "finetune_before_stage1", [](ExperimentConfig& c) -> bool& { return c.finetune_before_stage1; });

    add_optim(f, "optim.teacher", &ExperimentConfig::optim_teacher);
    add_optim(f, "optim.finetune", &ExperimentConfig::optim_finetune);
    add_optim(f, "optim.stage1", &ExperimentConfig::optim_stage1);
    add_optim(f, "optim.stage2", &ExperimentConfig::optim_stage2);

    add_double(f, "distill", "alpha1", [](ExperimentConfig& c) -> double& { return c.distill.alpha1; });
    add_double(f, "distill", "alpha2", [](ExperimentConfig& c) -> double& { return c.distill.alpha2; });
    add_double(f, "distill", "temperature", [](ExperimentConfig& c) -> double& { return c.distill.temperature; });
    add_bool(f, "distill", "t2_scaling", [](ExperimentConfig& c) -> bool& { return c.distill.t2_scaling; });
    f.push_back({"distill", "ted_variant",
                 [](ExperimentConfig& c, const std::string& v) { c.distill.variant = parse_ted_variant(v); },
                 [](const ExperimentConfig& c) { return to_string(c.distill.variant); }});
    f.push_back({"distill", "layer_map", [](ExperimentConfig& c, const std::string& v) { c.layer_map_text = v; },
                 [](const ExperimentConfig& c) { return c.layer_map_text; }});
    f.push_back({"distill", "teacher_filters",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.distill.teacher_filters = parse_teacher_filter_init(v);
                 },
                 [](const ExperimentConfig& c) { return to_string(c.distill.teacher_filters); }});
    f.push_back({"distill", "student_filters",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.distill.student_filters = parse_student_filter_init(v);
                 },
                 [](const ExperimentConfig& c) { return to_string(c.distill.student_filters); }});
    f.push_back({"distill", "alpha2_sweep",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.alpha2_sweep.clear();
                   for (const auto& t : split_list(v)) c.alpha2_sweep.push_back(to_double(t));
                 },
                 [](const ExperimentConfig& c) {
                   std::string s;
                   for (double a : c.alpha2_sweep) s += (s.empty() ? "" : ",") + fmt(a);
                   return s;
                 }});

    f.push_back({"filters", "arch", [](ExperimentConfig& c, const std::string& v) { c.filter_arch = parse_filter_arch(v); },
                 [](const ExperimentConfig& c) { return to_string(c.filter_arch); }});
    add_size(f, "filters", "subsequent_layers", [](ExperimentConfig& c) -> std::size_t& { return c.subsequent_layers; });
    f.push_back({"filters", "student_source",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "train") c.student_filter_source = StudentFilterSource::Train;
                   else if (v == "copy_teacher") c.student_filter_source = StudentFilterSource::CopyTeacher;
                   else throw ParameterError("student_source must be train or copy_teacher, got '" + v + "'");
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.student_filter_source == StudentFilterSource::Train ? "train" : "copy_teacher");
                 }});

    f.push_back({"run", "seeds",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.seeds.clear();
                   for (const auto& t : split_list(v)) c.seeds.push_back(to_size(t));
                 },
                 [](const ExperimentConfig& c) {
                   std::string s;
                   for (auto x : c.seeds) s += (s.empty() ? "" : ",") + std::to_string(x);
                   return s;
                 }});
    f.push_back({"run", "output_dir", [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; },
                 [](const ExperimentConfig& c) { return c.output_dir; }});
    add_bool(f, "run", "record_wall_time", [](ExperimentConfig& c) -> bool& { return c.record_wall_time; });
    add_size(f, "run", "eval_batch_size", [](ExperimentConfig& c) -> std::size_t& { return c.eval_batch_size; });
    return f;
  }();
  return all;
}

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) return &f;
  }
  return nullptr;
}

bool known_section(const std::string& section) {
  return std::any_of(fields().begin(), fields().end(), [&](const Field& f) { return f.section == section; });
}

void apply(ExperimentConfig& c, const std::string& section, const std::string& key, const std::string& value,
           std::size_t line, std::map<std::string, std::size_t>& lines) {
  if (!known_section(section)) throw ConfigError("unknown section [" + section + "]", line);
  const Field* f = find_field(section, key);
  if (!f) throw ConfigError("unknown key '" + key + "' in [" + section + "]", line);
  try {
    f->set(c, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what(), line);
  }
  lines[section + "." + key] = line;
}

}  // namespace

DatasetSplit TaskSpec::generate() const {
  if (kind == TaskKind::CausalLM) return gen_lm_corpus(seed, num_samples, seq_len, LmGrammar::BracketCopy, test_fraction);
  return gen_cls_task(seed, num_samples, seq_len, num_classes, rule, test_fraction);
}

Vocab TaskSpec::vocab() const { return kind == TaskKind::CausalLM ? lm_vocab() : cls_vocab(); }

std::string TaskSpec::canonical() const {
  std::ostringstream os;
  os << "kind=" << (kind == TaskKind::CausalLM ? "lm" : "cls") << ";seed=" << seed << ";num_samples=" << num_samples
     << ";seq_len=" << seq_len << ";test_fraction=" << fmt(test_fraction);
  if (kind == TaskKind::Classification) os << ";rule=" << to_string(rule) << ";num_classes=" << num_classes;
  return os.str();
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::vector<std::string>& overrides) {
  ExperimentConfig c;
  std::map<std::string, std::size_t> lines;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find_first_of("#;"); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("malformed section header '" + line + "'", line_no);
      section = trim(line.substr(1, line.size() - 2));
      if (!known_section(section)) throw ConfigError("unknown section [" + section + "]", line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value', got '" + line + "'", line_no);
    if (section.empty()) throw ConfigError("key outside of any section", line_no);
    const std::string key = trim(line.substr(0, eq));
    if (lines.count(section + "." + key)) throw ConfigError("duplicate key '" + key + "' in [" + section + "]", line_no);
    apply(c, section, key, trim(line.substr(eq + 1)), line_no, lines);
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    const auto dot = ov.rfind('.', eq);
    if (eq == std::string::npos || dot == std::string::npos) {
      throw ConfigError("override '" + ov + "' must look like section.key=value");
    }
    try {
      apply(c, ov.substr(0, dot), ov.substr(dot + 1, eq - dot - 1), trim(ov.substr(eq + 1)), 0, lines);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("override: ") + e.what());
    }
    lines[ov.substr(0, eq)] = 0;
  }
  c.source_lines = std::move(lines);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), overrides);
}

void ExperimentConfig::validate() {
  auto line_of = [this](const std::string& key) -> std::size_t {
    auto it = source_lines.find(key);
    return it == source_lines.end() ? 0 : it->second;
  };
  auto check = [&](bool ok, const std::string& key, const std::string& msg) {
    if (!ok) throw ConfigError(key + ": " + msg, line_of(key));
  };
  ExperimentConfig& c = *this;
  const auto& t = c.task;
  check(t.seq_len >= 2 && t.seq_len <= kMaxSeqLen, "task.seq_len",
        "must lie in [2, " + std::to_string(kMaxSeqLen) + "]");
  check(t.num_samples >= 2, "task.num_samples", "must be >= 2");
  check(t.test_fraction > 0.0 && t.test_fraction < 1.0, "task.test_fraction", "must lie in (0, 1)");
  if (t.kind == TaskKind::Classification) {
    const bool binary = t.rule != ClsRule::MajoritySymbol;
    check(binary ? t.num_classes == 2 : (t.num_classes >= 2 && t.num_classes <= 8), "task.num_classes",
          binary ? "pattern and parity rules have exactly 2 classes" : "majority rule needs 2..8 classes");
  }
  for (auto* m : {&c.teacher, &c.student}) {
    m->vocab_size = t.vocab().size();
    m->max_seq_len = t.seq_len;
    m->head = t.kind == TaskKind::CausalLM ? HeadKind::LanguageModel : HeadKind::Classifier;
    m->num_classes = t.kind == TaskKind::CausalLM ? 0 : t.num_classes;
  }
  for (const auto& [name, m] : {std::pair<std::string, const ModelConfig*>{"teacher", &c.teacher}, {"student", &c.student}}) {
    try {
      m->validate();
    } catch (const std::exception& e) {
      throw ConfigError("[" + name + "] " + e.what(), line_of(name + ".hidden_dim"));
    }
    check(m->depth >= 1, name + ".depth", "must be >= 1");
  }
  check(c.student.depth <= c.teacher.depth, "student.depth", "student cannot be deeper than the teacher");
  if (c.student_init == StudentInit::FromTeacher) {
    check(c.student.hidden_dim == c.teacher.hidden_dim && c.student.ffn_dim == c.teacher.ffn_dim &&
              c.student.head_count == c.teacher.head_count && c.student.tie_embeddings == c.teacher.tie_embeddings,
          "student.init", "from_teacher needs the teacher's width, ffn_dim, head_count and tie_embeddings; use fresh");
  }
  LayerMap map;
  try {
    map = LayerMap::parse(c.layer_map_text, c.student.depth, c.teacher.depth);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("distill.layer_map: ") + e.what(), line_of("distill.layer_map"));
  }
  for (const auto& [name, po] : {std::pair<std::string, const PhaseOptim*>{"optim.teacher", &c.optim_teacher},
                                 {"optim.finetune", &c.optim_finetune},
                                 {"optim.stage1", &c.optim_stage1},
                                 {"optim.stage2", &c.optim_stage2}}) {
    try {
      po->hyper.validate();
    } catch (const std::exception& e) {
      throw ConfigError("[" + name + "] " + e.what(), line_of(name + ".lr"));
    }
    check(po->log_every >= 1, name + ".log_every", "must be >= 1");
  }
  try {
    c.distill.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("[distill] ") + e.what(), line_of("distill.alpha1"));
  }
  for (double a : c.alpha2_sweep) check(a >= 0.0, "distill.alpha2_sweep", "values must be >= 0");
  if (c.distill.variant == TedVariant::KL) {
    check(c.distill.teacher_filters == TeacherFilterInit::Trained && c.distill.student_filters != StudentFilterInit::None,
          "distill.ted_variant", "the kl variant needs filter heads on both sides (teacher trained, student not none)");
  }
  if (c.student_filter_source == StudentFilterSource::CopyTeacher) {
    check(c.student.hidden_dim == c.teacher.hidden_dim, "filters.student_source",
          "copy_teacher needs equal teacher and student widths");
  }
  if (c.filter_arch == FilterArch::SubsequentLayers) {
    check(c.subsequent_layers >= 1, "filters.subsequent_layers", "must be >= 1");
    check(c.student.hidden_dim == c.teacher.hidden_dim, "filters.arch", "subsequent-layer filters need equal widths");
    for (std::size_t k = 1; k <= map.student_depth(); ++k) {
      check(map(k) + c.subsequent_layers <= c.teacher.depth, "filters.arch",
            "teacher layer " + std::to_string(map(k)) + " has fewer than " + std::to_string(c.subsequent_layers) +
                " following layers");
      check(c.student_filter_source == StudentFilterSource::CopyTeacher || k + c.subsequent_layers <= c.student.depth,
            "filters.arch",
            "student layer " + std::to_string(k) + " has fewer than " + std::to_string(c.subsequent_layers) +
                " following layers");
    }
  }
  if (c.filter_arch == FilterArch::Identity) {
    check(c.student.hidden_dim == c.teacher.hidden_dim, "filters.arch", "identity filters need equal widths");
  }
  check(!c.seeds.empty(), "run.seeds", "at least one seed is required");
  check(c.eval_batch_size >= 1, "run.eval_batch_size", "must be >= 1");
  check(!c.output_dir.empty(), "run.output_dir", "must not be empty");
  distill.layer_map = map;
}

std::string ExperimentConfig::resolved() const {
  std::string out, section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      out += (out.empty() ? "" : "\n") + std::string("[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get(*this) + "\n";
  }
  return out;
}

std::string ExperimentConfig::hash() const { return sha256_hex(resolved()); }

FilterSpec ExperimentConfig::filter_spec(bool student_side, std::uint64_t seed) const {
  FilterSpec s;
  s.arch = filter_arch;
  s.subsequent_layers = subsequent_layers;
  s.in_dim = student_side ? student.hidden_dim : teacher.hidden_dim;
  s.out_dim = teacher.hidden_dim;
  s.with_head = true;
  s.head = task.kind == TaskKind::CausalLM ? HeadKind::LanguageModel : HeadKind::Classifier;
  s.head_outputs = task.kind == TaskKind::CausalLM ? task.vocab().size() : task.num_classes;
  s.seed = seed;
  return s;
}

}  // namespace ted
