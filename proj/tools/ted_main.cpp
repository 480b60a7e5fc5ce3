// SPDX-License-Identifier: Apache-2.0
// ted: train a teacher, fit filters, distill, evaluate and compare runs.
#include <iostream>

#include "CLI11.hpp"
#include "ted/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise task-aware distillation for small transformers"};
  app.require_subcommand(1);
  ted::CommandOptions opt;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "experiment config (INI)")->required();
    sub->add_option("--set", opt.overrides, "override as section.key=value (repeatable)");
    sub->add_option("--out", opt.out, "output root (default: [run] output_dir)");
    sub->add_flag("--force", opt.force, "overwrite a completed run");
  };

  auto* teacher = app.add_subcommand("train-teacher", "train the teacher on the task");
  common(teacher);
  teacher->add_flag("--resume", opt.resume, "continue from the saved training state");
  teacher->add_option("--stop-after", opt.stop_after, "save state and stop after N steps");

  auto* stage1 = app.add_subcommand("stage1", "fit task-aware filters on the frozen backbones");
  common(stage1);
  auto* s1seed = stage1->add_option("--seed", seed, "run a single seed");
  stage1->add_option("--filters-from", opt.filters_from, "reuse the filters of another stage1 run");
  stage1->add_option("--tag", opt.tag, "suffix for the stage1 directory");
  stage1->add_flag("--resume", opt.resume, "not supported for stage1");

  auto* distill = app.add_subcommand("distill", "train the student");
  common(distill);
  distill->add_option("--mode", opt.mode, "ft | kd | lwd | ted");
  auto* dseed = distill->add_option("--seed", seed, "run a single seed");
  distill->add_option("--tag", opt.tag, "suffix for the run label");
  distill->add_option("--stage1-tag", opt.stage1_tag, "read filters from stage1-<tag>");
  distill->add_flag("--sweep", opt.sweep, "one run per [distill] alpha2_sweep value");
  distill->add_flag("--resume", opt.resume, "continue from the saved training state");
  distill->add_option("--stop-after", opt.stop_after, "save state and stop after N steps");

  auto* eval = app.add_subcommand("eval", "evaluate a model checkpoint on the task");
  eval->add_option("--config", opt.config, "experiment config (INI)")->required();
  eval->add_option("--set", opt.overrides, "override as section.key=value");
  eval->add_option("--checkpoint", opt.checkpoint, "model checkpoint")->required();
  eval->add_option("--split", opt.split, "train | test");
  eval->add_option("--out", opt.out, "result JSON (default: <checkpoint>.eval.json)");

  auto* compare = app.add_subcommand("compare", "tabulate completed runs");
  compare->add_option("runs", opt.runs, "run directories; a,b,c groups seeds into one row")->required();
  compare->add_option("--out", opt.out, "output directory (default: compare)");
  compare->add_option("--smooth", opt.smooth_window, "moving-average window for diagnostics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : ted::kExitConfig;
  }
  if (s1seed->count() || dseed->count()) opt.seed = seed;
  const std::string name = app.get_subcommands().front()->get_name();
  return ted::run_command(name, opt, std::cout, std::cerr);
}
