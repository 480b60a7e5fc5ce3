// SPDX-License-Identifier: Apache-2.0
//
// Per-layer filters g(H) that map a hidden state to the teacher width, optionally followed by a
// task head (final norm + projection, same shape as a model head). Banks hold one filter per
// matched layer pair and serialise under the "filter." prefix.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ted/checkpoint.hpp"
#include "ted/layer_map.hpp"
#include "ted/model.hpp"

namespace ted {

enum class FilterArch { LinearProjection, TwoLayerMLP, SubsequentLayers, Identity };

std::string to_string(FilterArch arch);
/// "linear", "mlp", "subsequent", "identity".
FilterArch parse_filter_arch(const std::string& name);

struct FilterSpec {
  FilterArch arch = FilterArch::LinearProjection;
  std::size_t subsequent_layers = 1;  // SubsequentLayers only
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  bool with_head = true;
  HeadKind head = HeadKind::LanguageModel;
  std::size_t head_outputs = 0;
  std::uint64_t seed = 0;
};

template <typename T>
struct TaskAwareFilter {
  FilterArch arch = FilterArch::Identity;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  LinearParams<T> proj;                // LinearProjection; first layer of TwoLayerMLP
  LinearParams<T> proj2;               // TwoLayerMLP second layer
  ModelConfig donor;                   // SubsequentLayers block shapes
  std::vector<BlockParams<T>> layers;  // SubsequentLayers
  HeadKind head_kind = HeadKind::LanguageModel;
  std::optional<HeadParams<T>> head;

  bool has_head() const { return head.has_value(); }
  void detach_head() { head.reset(); }
  void collect(const std::string& prefix, NamedParams<T>& out) const;
  TaskAwareFilter clone() const;
};

/// `donor` and `donor_layer` (1-based) are required for SubsequentLayers: the filter copies donor
/// blocks donor_layer+1 .. donor_layer+n. Throws ParameterError / UnsupportedError.
template <typename T>
TaskAwareFilter<T> build_filter(const FilterSpec& spec, const TransformerModel<T>* donor = nullptr,
                                std::size_t donor_layer = 0);

/// H [B x L x in_dim] -> [B x L x out_dim]; the head is not applied. `mask` is needed only by
/// SubsequentLayers filters.
template <typename T>
Tensor<T> filter_forward(const TaskAwareFilter<T>& filter, const Tensor<T>& h, const AttentionMask* mask = nullptr);

/// Task logits from the filtered representation. Throws ContractError if the head was removed.
template <typename T>
Tensor<T> filter_head_forward(const TaskAwareFilter<T>& filter, const Tensor<T>& h, const AttentionMask* mask = nullptr);

enum class BankOwner { Teacher, Student };

template <typename T>
struct FilterBank {
  BankOwner owner = BankOwner::Teacher;
  std::vector<std::size_t> source_layers;  // hidden-state index read by filter k (1-based layers)
  std::vector<TaskAwareFilter<T>> filters;
  std::string source_task;

  std::size_t size() const { return filters.size(); }
  NamedParams<T> named_parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool on);
  bool is_frozen() const;
  bool has_heads() const;
  void detach_heads();
  FilterBank clone() const;

  Checkpoint to_checkpoint() const;
  /// Parameters come back frozen.
  static FilterBank from_checkpoint(const Checkpoint& ck);
};

/// One filter per student layer k; teacher banks read H_t^{M(k)}, student banks read H_s^k.
/// SubsequentLayers filters take their blocks from `model`.
template <typename T>
FilterBank<T> build_filter_bank(const FilterSpec& spec, BankOwner owner, const LayerMap& map,
                                const TransformerModel<T>* model = nullptr);

/// Throws ArtifactError unless `bank` has `count` filters mapping in_dim -> out_dim.
template <typename T>
void check_bank_dims(const FilterBank<T>& bank, std::size_t count, std::size_t in_dim, std::size_t out_dim);

/// Sum over k of the task loss of head_k(g_k(H^{source_k})). The model must be frozen
/// (FreezeError otherwise); gradient reaches only the filters.
template <typename T>
Tensor<T> stage1_loss(const TransformerModel<T>& model, const FilterBank<T>& bank, const TokenBatch& batch,
                      std::vector<double>* per_layer = nullptr);

}  // namespace ted
