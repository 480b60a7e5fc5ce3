// SPDX-License-Identifier: Apache-2.0
//
// Shared optimisation loop for every phase. Batch order depends only on (seed, epoch) and the
// dropout stream only on (seed, step), so a run resumed from a saved state replays the
// uninterrupted run exactly.

#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ted/data.hpp"
#include "ted/model.hpp"
#include "ted/optim.hpp"

namespace ted {

inline constexpr const char* kMetricsHeader = "step,lr,task_loss,pred_loss,distill_loss,per_layer_distill_mean,wall_ms";

template <typename T>
struct StepTerms {
  Tensor<T> total;
  double task = 0.0;
  double pred = 0.0;
  double distill = 0.0;
  std::vector<double> per_layer;
};

template <typename T>
using StepFn = std::function<StepTerms<T>(const TokenBatch&, Rng& dropout_rng)>;

struct LoopOptions {
  Stage stage = Stage::Teacher;
  OptimHyper hyper;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;     // 0 disables periodic state saves
  std::filesystem::path metrics_path;   // CSV; empty disables
  std::filesystem::path layers_path;    // per-layer distillation CSV; empty disables
  std::filesystem::path state_path;     // resumable state checkpoint
  bool resume = false;
  std::size_t stop_after = 0;           // stop (and save state) after this many steps; 0 = run out
  bool record_wall_time = false;        // wall_ms column is 0 unless enabled
};

struct LoopResult {
  std::size_t total_steps = 0;
  std::size_t steps_done = 0;
  bool completed = false;
  double first_logged_task = 0.0;
  double last_logged_task = 0.0;
};

std::size_t total_steps(std::size_t num_samples, const OptimHyper& hyper);

/// Runs AdamW over `trainable` (names must be unique). Everything not listed stays untouched.
template <typename T>
LoopResult train_loop(const LoopOptions& opt, const TaskDataset& train, const NamedParams<T>& trainable,
                      const StepFn<T>& step_fn);

struct EvalMetrics {
  std::string metric;      // "perplexity" or "accuracy"
  double value = 0.0;
  double mean_loss = 0.0;  // token- or sample-weighted mean NLL
  std::size_t count = 0;   // predicted tokens or samples
};

/// Perplexity = exp(mean next-token NLL) for language models, accuracy for classifiers.
template <typename T>
EvalMetrics evaluate(const TransformerModel<T>& model, const TaskDataset& data, std::size_t batch_size = 64);

/// Numeric rows of a CSV written by train_loop; `header` receives the column names.
std::vector<std::vector<double>> read_metrics(const std::filesystem::path& path, std::vector<std::string>* header = nullptr);

}  // namespace ted
