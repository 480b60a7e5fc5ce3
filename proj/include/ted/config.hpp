// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration in a sectioned key = value format:
//
//   [task]           kind, name, seed, num_samples, seq_len, rule, num_classes, test_fraction
//   [teacher]        depth, hidden_dim, head_count, ffn_dim, dropout, tie_embeddings, seed
//   [student]        same model keys, plus init = from_teacher|fresh, finetune_before_stage1
//   [optim.teacher] [optim.finetune] [optim.stage1] [optim.stage2]
//                    lr, warmup_ratio, weight_decay, beta1, beta2, epsilon, batch_size, epochs,
//                    grad_clip, log_every, checkpoint_every
//   [distill]        alpha1, alpha2, temperature, t2_scaling, ted_variant, layer_map,
//                    teacher_filters, student_filters, alpha2_sweep
//   [filters]        arch, subsequent_layers, student_source = train|copy_teacher
//   [run]            seeds, output_dir, record_wall_time, eval_batch_size
//
// '#' and ';' start comments. Unknown sections or keys are rejected with their line number.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ted/data.hpp"
#include "ted/distill.hpp"
#include "ted/filters.hpp"
#include "ted/model.hpp"
#include "ted/optim.hpp"

namespace ted {

struct TaskSpec {
  TaskKind kind = TaskKind::CausalLM;
  std::string name = "task";
  std::uint64_t seed = 0;
  std::size_t num_samples = 1000;
  std::size_t seq_len = 32;
  ClsRule rule = ClsRule::MajoritySymbol;
  std::size_t num_classes = 2;
  double test_fraction = 0.05;

  DatasetSplit generate() const;
  Vocab vocab() const;
  /// Canonical text identifying the task; equal text means identical data.
  std::string canonical() const;
};

struct PhaseOptim {
  OptimHyper hyper;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;
};

enum class StudentInit { FromTeacher, Fresh };
enum class StudentFilterSource { Train, CopyTeacher };

struct ExperimentConfig {
  TaskSpec task;
  ModelConfig teacher;
  std::uint64_t teacher_seed = 0;
  ModelConfig student;
  StudentInit student_init = StudentInit::FromTeacher;
  bool finetune_before_stage1 = false;
  PhaseOptim optim_teacher, optim_finetune, optim_stage1, optim_stage2;
  DistillConfig distill;
  std::string layer_map_text = "identity";
  std::vector<double> alpha2_sweep;
  FilterArch filter_arch = FilterArch::LinearProjection;
  std::size_t subsequent_layers = 1;
  StudentFilterSource student_filter_source = StudentFilterSource::Train;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "runs";
  bool record_wall_time = false;
  std::size_t eval_batch_size = 64;
  std::map<std::string, std::size_t> source_lines;  // "section.key" -> line, 0 for overrides

  /// Throws ConfigError (with the source line when known).
  static ExperimentConfig parse(const std::string& text, const std::vector<std::string>& overrides = {});
  static ExperimentConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

  /// Cross-field checks; also fills the task-derived model fields and the layer map. Called by parse.
  void validate();
  /// Every key with its resolved value, in section order. parse(resolved()) reproduces *this.
  std::string resolved() const;
  /// SHA-256 of resolved().
  std::string hash() const;

  FilterSpec filter_spec(bool student_side, std::uint64_t seed) const;
};

}  // namespace ted
