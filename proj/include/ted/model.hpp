// SPDX-License-Identifier: Apache-2.0
//
// Minimal pre-layer-norm transformer exposing every residual-stream hidden state.
//
// hidden_states[0] is the embedding output (token + learned position); hidden_states[k] is the
// residual stream after block k. The head applies a final layer norm and a projection: over
// every position for language modelling, or on position 0 for classification. Language models
// attend causally; classifiers attend bidirectionally over non-padding keys.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ted/checkpoint.hpp"
#include "ted/data.hpp"
#include "ted/layer_map.hpp"
#include "ted/rng.hpp"
#include "ted/tensor.hpp"

namespace ted {

enum class HeadKind { LanguageModel, Classifier };

struct ModelConfig {
  std::size_t depth = 2;
  std::size_t hidden_dim = 64;
  std::size_t head_count = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 17;
  std::size_t max_seq_len = 64;
  double dropout_rate = 0.0;
  bool tie_embeddings = false;
  HeadKind head = HeadKind::LanguageModel;
  std::size_t num_classes = 0;  // classifier only

  /// Throws ParameterError.
  void validate() const;
  bool causal() const { return head == HeadKind::LanguageModel; }
  std::size_t head_outputs() const { return head == HeadKind::LanguageModel ? vocab_size : num_classes; }

  Metadata to_metadata() const;
  static ModelConfig from_metadata(const Metadata& meta);
  bool operator==(const ModelConfig&) const = default;
};

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kInitStd = 0.02;

/// Per-batch attention permissions, [batch x length x length], 1 = key visible to query.
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask build(const TokenBatch& batch, bool causal);
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out], may be undefined

  static LinearParams init(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  static NormParams init(std::size_t dim);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
struct BlockParams {
  NormParams<T> ln1;
  LinearParams<T> q, k, v, o;
  NormParams<T> ln2;
  LinearParams<T> fc1, fc2;

  static BlockParams init(const ModelConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, NamedParams<T>& out) const;
  BlockParams clone() const;
};

/// One pre-LN block: x + attn(ln1(x)), then + mlp(ln2(.)). x is [B x L x d].
template <typename T>
Tensor<T> block_forward(const BlockParams<T>& block, const ModelConfig& cfg, const Tensor<T>& x,
                        const AttentionMask& mask, Rng* dropout_rng = nullptr);

/// Final norm + projection, shared by model heads and filter heads.
template <typename T>
struct HeadParams {
  NormParams<T> norm;
  Tensor<T> weight;  // [d x outputs]; undefined when tied to the token embedding
  Tensor<T> bias;    // [outputs]

  static HeadParams init(std::size_t in, std::size_t outputs, Rng& rng, bool tied = false);
  void collect(const std::string& prefix, NamedParams<T>& out) const;
  HeadParams clone() const;
};

/// LM: h [B x L x d] -> logits [B x L x V]. Classifier: position 0 -> [B x C].
/// `tied_table` supplies the projection as table^T when the head weight is tied.
template <typename T>
Tensor<T> head_forward(const HeadParams<T>& head, HeadKind kind, const Tensor<T>& h,
                       const Tensor<T>* tied_table = nullptr);

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::vector<Tensor<T>> hidden_states;  // depth + 1 entries, each [B x L x d]
};

template <typename T>
class TransformerModel {
 public:
  TransformerModel() = default;
  TransformerModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Throws ValidationError for ids >= vocab_size or sequences longer than max_seq_len.
  ForwardResult<T> forward(const TokenBatch& batch, Rng* dropout_rng = nullptr) const;

  void check_batch(const TokenBatch& batch) const;
  AttentionMask mask_for(const TokenBatch& batch) const { return AttentionMask::build(batch, cfg_.causal()); }
  Tensor<T> embed(const TokenBatch& batch, Rng* dropout_rng = nullptr) const;
  /// Runs block `index` (0-based) on a residual stream.
  Tensor<T> run_block(std::size_t index, const Tensor<T>& x, const AttentionMask& mask, Rng* dropout_rng = nullptr) const;
  Tensor<T> head(const Tensor<T>& final_hidden) const;

  NamedParams<T> named_parameters() const;
  std::size_t parameter_count() const;
  /// Toggles requires_grad on every parameter.
  void set_trainable(bool on);
  bool is_frozen() const;

  /// Storage-independent copy.
  TransformerModel clone() const;

  std::vector<BlockParams<T>>& blocks() { return blocks_; }
  const std::vector<BlockParams<T>>& blocks() const { return blocks_; }
  HeadParams<T>& head_params() { return head_; }
  const HeadParams<T>& head_params() const { return head_; }
  Tensor<T>& token_embedding() { return tok_emb_; }
  const Tensor<T>& token_embedding() const { return tok_emb_; }
  Tensor<T>& position_embedding() { return pos_emb_; }

  Checkpoint to_checkpoint() const;
  /// Restores config and parameters; parameters come back frozen.
  static TransformerModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& path) const { to_checkpoint().save(path); }
  static TransformerModel load(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }

 private:
  ModelConfig cfg_;
  Tensor<T> tok_emb_;
  Tensor<T> pos_emb_;
  std::vector<BlockParams<T>> blocks_;
  HeadParams<T> head_;
};

/// LM: mean next-token cross-entropy over positions 0..L-2. Classifier: cross-entropy of labels.
/// Throws ContractError if the batch kind does not match the head.
template <typename T>
Tensor<T> task_loss_from_logits(HeadKind kind, const Tensor<T>& logits, const TokenBatch& batch);

template <typename T>
Tensor<T> task_loss(const TransformerModel<T>& model, const TokenBatch& batch, Rng* dropout_rng = nullptr);

/// Student with block k a deep copy of teacher block M(k); embeddings and head copied.
/// `student_cfg.depth` must equal map.student_depth(); widths must match (UnsupportedError).
template <typename T>
TransformerModel<T> init_student_from_teacher(const TransformerModel<T>& teacher, const ModelConfig& student_cfg,
                                              const LayerMap& map);

/// SHA-256 of the serialized checkpoint.
template <typename T>
std::string parameter_hash(const TransformerModel<T>& model);

extern template class TransformerModel<float>;
extern template class TransformerModel<double>;

}  // namespace ted
