// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, the linear warmup/decay schedule, and the serialisable
// optimizer state used for resumable training.

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ted/checkpoint.hpp"
#include "ted/model.hpp"

namespace ted {

struct OptimHyper {
  double base_lr = 2.5e-4;
  double warmup_ratio = 0.05;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-6;
  std::size_t batch_size = 16;  // sequences
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // global-norm clip, 0 disables

  /// Throws ParameterError.
  void validate() const;
};

/// Linear ramp from 0 to base_lr over warmup_ratio * total_steps, then linear decay to 0 at
/// total_steps. Steps past the end return 0 and print a warning once.
double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_ratio, double base_lr);

enum class Stage { Teacher = 0, StageI = 1, StageII = 2, Finetune = 3 };

struct TrainState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::set<std::string> frozen;
  Stage stage = Stage::Teacher;
  std::uint64_t seed = 0;

  /// Moments and counters; parameter values are saved separately by the caller.
  void save_into(Checkpoint& ck) const;
  static TrainState load_from(const Checkpoint& ck);
};

/// Global L2 norm of all present gradients.
template <typename T>
double grad_norm(const NamedParams<T>& params);

/// One AdamW update at learning rate `lr`, advancing state.step. A parameter is frozen when it
/// does not require grad or is listed in state.frozen; frozen parameters must carry no gradient
/// (FreezeError) and are left untouched. Every other parameter must have a gradient.
template <typename T>
void adamw_step(const NamedParams<T>& params, TrainState& state, const OptimHyper& hyper, double lr);

}  // namespace ted
