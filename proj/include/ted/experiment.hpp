// SPDX-License-Identifier: Apache-2.0
//
// The command layer behind the `ted` executable. Run layout under the output root:
//
//   teacher/                         model.ckpt, metrics.csv, config.ini, manifest.json
//   seed-<s>/stage1[-<tag>]/         teacher_filters.ckpt, student_filters.ckpt, student_init.ckpt
//   seed-<s>/distill-<label>/        student.ckpt, metrics.csv, layers.csv, manifest.json
//   seed-<s>/sweep-<label>.csv       one row per alpha2 value
//
// Each manifest records the resolved-config hash, the task identity, and the SHA-256 of every
// parent artifact it consumed, so `compare` can verify the chain.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace ted {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitArtifact = 3, kExitMismatch = 4 };

struct CommandOptions {
  std::filesystem::path config;
  std::vector<std::string> overrides;  // section.key=value
  std::string mode = "ted";
  std::optional<std::uint64_t> seed;   // default: every seed listed in [run]
  std::filesystem::path filters_from;  // stage1: another run's stage1 directory
  std::string tag;
  std::string stage1_tag;              // distill: read seed-<s>/stage1-<tag>
  bool force = false;
  std::filesystem::path out;           // output root (compare: output directory)
  bool sweep = false;
  bool resume = false;
  std::size_t stop_after = 0;
  std::filesystem::path checkpoint;    // eval
  std::string split = "test";          // eval
  std::vector<std::string> runs;       // compare; "a,b,c" groups runs into one row
  std::size_t smooth_window = 0;       // compare; 0 = a quarter of the curve
};

int cmd_train_teacher(const CommandOptions& opt, std::ostream& out);
int cmd_stage1(const CommandOptions& opt, std::ostream& out);
int cmd_distill(const CommandOptions& opt, std::ostream& out);
int cmd_eval(const CommandOptions& opt, std::ostream& out);
int cmd_compare(const CommandOptions& opt, std::ostream& out);

/// Dispatches by name and maps exceptions to exit codes, printing the message to `err`.
int run_command(const std::string& name, const CommandOptions& opt, std::ostream& out, std::ostream& err);

/// Trailing moving average with the given window (clamped to the series length).
std::vector<double> smooth(const std::vector<double>& v, std::size_t window);

}  // namespace ted
