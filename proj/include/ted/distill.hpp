// SPDX-License-Identifier: Apache-2.0
//
// Distillation losses and the combined student objective:
//   total = task + alpha1 * pred + alpha2 * {layerwise | ted | 0}
// The teacher side is always evaluated without a graph, so no gradient can reach it.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ted/filters.hpp"
#include "ted/layer_map.hpp"
#include "ted/model.hpp"

namespace ted {

enum class DistillMode { FT, KD, LWD, TED };
enum class TedVariant { MSE, KL };
enum class TeacherFilterInit { Trained, None };
enum class StudentFilterInit { Trained, Random, None };

std::string to_string(DistillMode m);
DistillMode parse_distill_mode(const std::string& s);  // ft|kd|lwd|ted
std::string to_string(TedVariant v);
TedVariant parse_ted_variant(const std::string& s);  // mse|kl
std::string to_string(TeacherFilterInit v);
TeacherFilterInit parse_teacher_filter_init(const std::string& s);  // trained|none
std::string to_string(StudentFilterInit v);
StudentFilterInit parse_student_filter_init(const std::string& s);  // trained|random|none

inline constexpr double kDefaultAlpha1 = 2.5;
inline constexpr double kDefaultAlpha2 = 0.1;
inline constexpr double kDefaultTemperature = 2.0;

struct DistillConfig {
  DistillMode mode = DistillMode::TED;
  double alpha1 = kDefaultAlpha1;
  double alpha2 = kDefaultAlpha2;
  double temperature = kDefaultTemperature;
  bool t2_scaling = true;
  TedVariant variant = TedVariant::MSE;
  LayerMap layer_map;
  TeacherFilterInit teacher_filters = TeacherFilterInit::Trained;
  StudentFilterInit student_filters = StudentFilterInit::Trained;

  /// Throws ParameterError.
  void validate() const;
  /// FT zeroes both weights, KD zeroes alpha2.
  DistillConfig normalized() const;
};

/// T^2 * KL(softmax(z_t / T) || softmax(z_s / T)) with z_t detached; the T^2 factor is optional.
template <typename T>
Tensor<T> pred_distill_loss(const Tensor<T>& logits_t, const Tensor<T>& logits_s, double temperature,
                            bool t2_scaling = true);

/// Learnable [d_s x d_t] maps, one per student layer.
template <typename T>
struct Projections {
  std::vector<Tensor<T>> weights;

  static Projections init(std::size_t count, std::size_t d_s, std::size_t d_t, std::uint64_t seed);
  NamedParams<T> named_parameters() const;
  Checkpoint to_checkpoint() const;
};

/// Sum over k of mse(H_t^{M(k)}, H_s^k W_k). `per_layer` receives each term.
template <typename T>
Tensor<T> layerwise_loss(const std::vector<Tensor<T>>& hidden_t, const std::vector<Tensor<T>>& hidden_s,
                         const Projections<T>& proj, const LayerMap& map, std::vector<double>* per_layer = nullptr);

struct TedLossOptions {
  TedVariant variant = TedVariant::MSE;
  double temperature = kDefaultTemperature;
  bool t2_scaling = true;
};

/// MSE: sum over k of mse(g_t^k(H_t^{M(k)}), g_s^k(H_s^k)), heads must be removed.
/// KL: sum over k of T^2 KL between the head outputs, heads must be present.
/// Teacher filters must be frozen.
template <typename T>
Tensor<T> ted_loss(const std::vector<Tensor<T>>& hidden_t, const std::vector<Tensor<T>>& hidden_s,
                   const FilterBank<T>& bank_t, const FilterBank<T>& bank_s, const LayerMap& map,
                   const TedLossOptions& opt, const AttentionMask* mask = nullptr,
                   std::vector<double>* per_layer = nullptr);

template <typename T>
struct Stage2Terms {
  Tensor<T> total;
  double task = 0.0;
  double pred = 0.0;
  double distill = 0.0;
  std::vector<double> per_layer;
};

template <typename T>
struct Stage2Inputs {
  const TransformerModel<T>* teacher = nullptr;
  TransformerModel<T>* student = nullptr;
  const FilterBank<T>* bank_t = nullptr;
  const FilterBank<T>* bank_s = nullptr;
  const Projections<T>* projections = nullptr;
};

/// Throws ParameterError when a component needed by the mode is missing.
template <typename T>
Stage2Terms<T> stage2_objective(const DistillConfig& cfg, const TokenBatch& batch, const Stage2Inputs<T>& in,
                                Rng* dropout_rng = nullptr);

}  // namespace ted
