// SPDX-License-Identifier: Apache-2.0
#include "ted/model.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "ted/errors.hpp"
#include "ted/hash.hpp"
#include "ted/ops.hpp"

namespace ted {

namespace {

std::size_t to_size(const Metadata& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw ArtifactError("checkpoint metadata lacks '" + key + "'");
  return std::stoul(it->second);
}

const std::string& lookup(const Metadata& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw ArtifactError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> maybe_clone(const Tensor<T>& t) {
  return t.defined() ? t.clone() : Tensor<T>{};
}

}  // namespace

void ModelConfig::validate() const {
  if (hidden_dim == 0 || head_count == 0 || ffn_dim == 0 || vocab_size == 0 || max_seq_len == 0) {
    throw ParameterError("model config: sizes must be >= 1");
  }
  if (hidden_dim % head_count != 0) {
    throw ParameterError("model config: hidden_dim " + std::to_string(hidden_dim) + " not divisible by head_count " +
                         std::to_string(head_count));
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ParameterError("model config: dropout_rate must lie in [0, 1)");
  if (head == HeadKind::Classifier && num_classes < 2) throw ParameterError("model config: classifier needs >= 2 classes");
  if (head == HeadKind::Classifier && tie_embeddings) {
    throw ParameterError("model config: tied embeddings only apply to language-model heads");
  }
}

Metadata ModelConfig::to_metadata() const {
  auto fmt = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {
      {"model.depth", std::to_string(depth)},
      {"model.hidden_dim", std::to_string(hidden_dim)},
      {"model.head_count", std::to_string(head_count)},
      {"model.ffn_dim", std::to_string(ffn_dim)},
      {"model.vocab_size", std::to_string(vocab_size)},
      {"model.max_seq_len", std::to_string(max_seq_len)},
      {"model.dropout_rate", fmt(dropout_rate)},
      {"model.tie_embeddings", tie_embeddings ? "true" : "false"},
      {"model.head", head == HeadKind::LanguageModel ? "lm" : "cls"},
      {"model.num_classes", std::to_string(num_classes)},
  };
}

ModelConfig ModelConfig::from_metadata(const Metadata& meta) {
  ModelConfig c;
  c.depth = to_size(meta, "model.depth");
  c.hidden_dim = to_size(meta, "model.hidden_dim");
  c.head_count = to_size(meta, "model.head_count");
  c.ffn_dim = to_size(meta, "model.ffn_dim");
  c.vocab_size = to_size(meta, "model.vocab_size");
  c.max_seq_len = to_size(meta, "model.max_seq_len");
  c.dropout_rate = std::stod(lookup(meta, "model.dropout_rate"));
  c.tie_embeddings = lookup(meta, "model.tie_embeddings") == "true";
  c.head = lookup(meta, "model.head") == "lm" ? HeadKind::LanguageModel : HeadKind::Classifier;
  c.num_classes = to_size(meta, "model.num_classes");
  c.validate();
  return c;
}

AttentionMask AttentionMask::build(const TokenBatch& batch, bool causal) {
  AttentionMask m;
  m.batch = batch.batch;
  m.length = batch.length;
  const std::size_t l = batch.length;
  m.allowed.assign(batch.batch * l * l, 0);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const std::int32_t* ids = batch.ids.data() + b * l;
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t j = 0; j < l; ++j) {
        const bool visible = (!causal || j <= i) && (ids[j] != Vocab::kPad || j == 0);
        m.allowed[(b * l + i) * l + j] = visible ? 1 : 0;
      }
    }
  }
  return m;
}

template <typename T>
LinearParams<T> LinearParams<T>::init(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  LinearParams p;
  p.weight = normal_tensor<T>({in, out}, rng, kInitStd);
  if (with_bias) p.bias = Tensor<T>::zeros({out}, true);
  return p;
}

template <typename T>
Tensor<T> LinearParams<T>::operator()(const Tensor<T>& x) const {
  return linear(x, weight, bias);
}

template <typename T>
NormParams<T> NormParams<T>::init(std::size_t dim) {
  return {Tensor<T>::full({dim}, T(1), true), Tensor<T>::zeros({dim}, true)};
}

template <typename T>
Tensor<T> NormParams<T>::operator()(const Tensor<T>& x) const {
  return layer_norm(x, gamma, beta, kLayerNormEps);
}

template <typename T>
BlockParams<T> BlockParams<T>::init(const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.hidden_dim;
  BlockParams b;
  b.ln1 = NormParams<T>::init(d);
  b.q = LinearParams<T>::init(d, d, rng);
  b.k = LinearParams<T>::init(d, d, rng);
  b.v = LinearParams<T>::init(d, d, rng);
  b.o = LinearParams<T>::init(d, d, rng);
  b.ln2 = NormParams<T>::init(d);
  b.fc1 = LinearParams<T>::init(d, cfg.ffn_dim, rng);
  b.fc2 = LinearParams<T>::init(cfg.ffn_dim, d, rng);
  return b;
}

template <typename T>
void BlockParams<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  auto norm = [&](const std::string& name, const NormParams<T>& n) {
    out.emplace_back(prefix + name + ".gamma", n.gamma);
    out.emplace_back(prefix + name + ".beta", n.beta);
  };
  auto lin = [&](const std::string& name, const LinearParams<T>& l) {
    out.emplace_back(prefix + name + ".weight", l.weight);
    if (l.bias.defined()) out.emplace_back(prefix + name + ".bias", l.bias);
  };
  norm("ln1", ln1);
  lin("attn.q", q);
  lin("attn.k", k);
  lin("attn.v", v);
  lin("attn.o", o);
  norm("ln2", ln2);
  lin("mlp.fc1", fc1);
  lin("mlp.fc2", fc2);
}

template <typename T>
BlockParams<T> BlockParams<T>::clone() const {
  auto cl = [](const LinearParams<T>& l) { return LinearParams<T>{l.weight.clone(), maybe_clone(l.bias)}; };
  auto cn = [](const NormParams<T>& n) { return NormParams<T>{n.gamma.clone(), n.beta.clone()}; };
  return {cn(ln1), cl(q), cl(k), cl(v), cl(o), cn(ln2), cl(fc1), cl(fc2)};
}

template <typename T>
Tensor<T> block_forward(const BlockParams<T>& block, const ModelConfig& cfg, const Tensor<T>& x,
                        const AttentionMask& mask, Rng* dropout_rng) {
  if (x.rank() != 3 || x.dim(2) != cfg.hidden_dim) {
    throw DimensionError("block_forward: input " + shape_str(x.shape()) + " vs hidden_dim " +
                         std::to_string(cfg.hidden_dim));
  }
  const std::size_t b = x.dim(0), l = x.dim(1), d = cfg.hidden_dim, h = cfg.head_count, dh = d / h;
  if (mask.batch != b || mask.length != l) throw DimensionError("block_forward: attention mask does not match input");
  const double rate = dropout_rng ? cfg.dropout_rate : 0.0;
  auto drop = [&](const Tensor<T>& t) { return rate > 0.0 ? dropout(t, rate, *dropout_rng) : t; };
  auto split_heads = [&](const Tensor<T>& t, std::vector<std::size_t> axes, Shape out) {
    return reshape(permute(reshape(t, {b, l, h, dh}), axes), std::move(out));
  };

  const Tensor<T> hn = block.ln1(x);
  const Tensor<T> q = split_heads(block.q(hn), {0, 2, 1, 3}, {b * h, l, dh});
  const Tensor<T> kt = split_heads(block.k(hn), {0, 2, 3, 1}, {b * h, dh, l});
  const Tensor<T> v = split_heads(block.v(hn), {0, 2, 1, 3}, {b * h, l, dh});

  Tensor<T> scores = scale(bmm(q, kt), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  scores = masked_fill(scores, std::span<const std::uint8_t>(mask.allowed), h);
  const Tensor<T> att = drop(softmax(scores));
  const Tensor<T> ctx = reshape(permute(reshape(bmm(att, v), {b, h, l, dh}), {0, 2, 1, 3}), {b, l, d});
  const Tensor<T> x1 = add(x, drop(block.o(ctx)));

  const Tensor<T> m = block.fc2(gelu(block.fc1(block.ln2(x1))));
  return add(x1, drop(m));
}

template <typename T>
HeadParams<T> HeadParams<T>::init(std::size_t in, std::size_t outputs, Rng& rng, bool tied) {
  HeadParams p;
  p.norm = NormParams<T>::init(in);
  if (!tied) p.weight = normal_tensor<T>({in, outputs}, rng, kInitStd);
  p.bias = Tensor<T>::zeros({outputs}, true);
  return p;
}

template <typename T>
void HeadParams<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  out.emplace_back(prefix + "norm.gamma", norm.gamma);
  out.emplace_back(prefix + "norm.beta", norm.beta);
  if (weight.defined()) out.emplace_back(prefix + "weight", weight);
  out.emplace_back(prefix + "bias", bias);
}

template <typename T>
HeadParams<T> HeadParams<T>::clone() const {
  return {{norm.gamma.clone(), norm.beta.clone()}, maybe_clone(weight), bias.clone()};
}

template <typename T>
Tensor<T> head_forward(const HeadParams<T>& head, HeadKind kind, const Tensor<T>& h, const Tensor<T>* tied_table) {
  if (h.rank() != 3) throw DimensionError("head_forward: expects [B x L x d], got " + shape_str(h.shape()));
  Tensor<T> w = head.weight;
  if (!w.defined()) {
    if (!tied_table) throw ContractError("head_forward: tied head needs the embedding table");
    w = transpose(*tied_table);
  }
  const Tensor<T> pooled = kind == HeadKind::Classifier ? select_position(h, 0) : h;
  return linear(head.norm(pooled), w, head.bias);
}

template <typename T>
TransformerModel<T>::TransformerModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0x4d4f44454c));
  tok_emb_ = normal_tensor<T>({cfg_.vocab_size, cfg_.hidden_dim}, rng, kInitStd);
  pos_emb_ = normal_tensor<T>({cfg_.max_seq_len, cfg_.hidden_dim}, rng, kInitStd);
  for (std::size_t i = 0; i < cfg_.depth; ++i) blocks_.push_back(BlockParams<T>::init(cfg_, rng));
  head_ = HeadParams<T>::init(cfg_.hidden_dim, cfg_.head_outputs(), rng, cfg_.tie_embeddings);
}

template <typename T>
void TransformerModel<T>::check_batch(const TokenBatch& batch) const {
  if (batch.length == 0 || batch.batch == 0) throw ValidationError("forward: empty batch");
  if (batch.length > cfg_.max_seq_len) {
    throw ValidationError("forward: sequence length " + std::to_string(batch.length) + " exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
  }
  if (batch.ids.size() != batch.batch * batch.length) throw DimensionError("forward: batch ids size mismatch");
  for (std::int32_t id : batch.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw ValidationError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(cfg_.vocab_size));
    }
  }
}

template <typename T>
Tensor<T> TransformerModel<T>::embed(const TokenBatch& batch, Rng* dropout_rng) const {
  check_batch(batch);
  const std::size_t b = batch.batch, l = batch.length, d = cfg_.hidden_dim;
  std::vector<std::int32_t> positions(b * l);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % l);
  Tensor<T> x = add(embedding(tok_emb_, std::span<const std::int32_t>(batch.ids)),
                    embedding(pos_emb_, std::span<const std::int32_t>(positions)));
  if (dropout_rng && cfg_.dropout_rate > 0.0) x = dropout(x, cfg_.dropout_rate, *dropout_rng);
  return reshape(x, {b, l, d});
}

template <typename T>
Tensor<T> TransformerModel<T>::run_block(std::size_t index, const Tensor<T>& x, const AttentionMask& mask,
                                         Rng* dropout_rng) const {
  if (index >= blocks_.size()) throw IndexError("run_block: no block " + std::to_string(index));
  return block_forward(blocks_[index], cfg_, x, mask, dropout_rng);
}

template <typename T>
Tensor<T> TransformerModel<T>::head(const Tensor<T>& final_hidden) const {
  return head_forward(head_, cfg_.head, final_hidden, &tok_emb_);
}

template <typename T>
ForwardResult<T> TransformerModel<T>::forward(const TokenBatch& batch, Rng* dropout_rng) const {
  ForwardResult<T> r;
  const AttentionMask mask = mask_for(batch);
  r.hidden_states.reserve(blocks_.size() + 1);
  r.hidden_states.push_back(embed(batch, dropout_rng));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    r.hidden_states.push_back(run_block(i, r.hidden_states.back(), mask, dropout_rng));
  }
  r.logits = head(r.hidden_states.back());
  return r;
}

template <typename T>
NamedParams<T> TransformerModel<T>::named_parameters() const {
  NamedParams<T> out;
  out.emplace_back("embed.token", tok_emb_);
  out.emplace_back("embed.position", pos_emb_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect("block." + std::to_string(i) + ".", out);
  head_.collect("head.", out);
  return out;
}

template <typename T>
std::size_t TransformerModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

template <typename T>
void TransformerModel<T>::set_trainable(bool on) {
  for (auto& [name, t] : named_parameters()) t.set_requires_grad(on);
}

template <typename T>
bool TransformerModel<T>::is_frozen() const {
  for (const auto& [name, t] : named_parameters()) {
    if (t.requires_grad()) return false;
  }
  return true;
}

template <typename T>
TransformerModel<T> TransformerModel<T>::clone() const {
  TransformerModel m;
  m.cfg_ = cfg_;
  m.tok_emb_ = tok_emb_.clone();
  m.pos_emb_ = pos_emb_.clone();
  for (const auto& b : blocks_) m.blocks_.push_back(b.clone());
  m.head_ = head_.clone();
  return m;
}

template <typename T>
Checkpoint TransformerModel<T>::to_checkpoint() const {
  Checkpoint ck;
  ck.meta = cfg_.to_metadata();
  ck.meta["artifact"] = "model";
  for (const auto& [name, t] : named_parameters()) ck.put(name, t);
  return ck;
}

template <typename T>
TransformerModel<T> TransformerModel<T>::from_checkpoint(const Checkpoint& ck) {
  TransformerModel m(ModelConfig::from_metadata(ck.meta), 0);
  auto params = m.named_parameters();
  std::set<std::string> expected;
  for (auto& [name, t] : params) {
    ck.load_into(name, t);
    t.set_requires_grad(false);
    expected.insert(name);
  }
  for (const auto& name : ck.names()) {
    if (!expected.count(name)) throw ArtifactError("model checkpoint has unexpected blob '" + name + "'");
  }
  return m;
}

template <typename T>
Tensor<T> task_loss_from_logits(HeadKind kind, const Tensor<T>& logits, const TokenBatch& batch) {
  if (kind == HeadKind::LanguageModel) {
    if (batch.kind != TaskKind::CausalLM || !batch.labels.empty()) {
      throw ContractError("task_loss: language-model head needs a causal-LM batch");
    }
    if (batch.length < 2) throw ContractError("task_loss: next-token loss needs sequences of length >= 2");
    const std::size_t b = batch.batch, l = batch.length;
    if (logits.rank() != 3 || logits.dim(0) != b || logits.dim(1) != l) {
      throw DimensionError("task_loss: logits " + shape_str(logits.shape()) + " do not match batch");
    }
    const std::size_t v = logits.dim(2);
    std::vector<std::int32_t> targets;
    targets.reserve(b * (l - 1));
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t t = 0; t + 1 < l; ++t) targets.push_back(batch.ids[i * l + t + 1]);
    }
    const Tensor<T> shifted = reshape(slice_positions(logits, 0, l - 1), {b * (l - 1), v});
    return cross_entropy(shifted, std::span<const std::int32_t>(targets));
  }
  if (batch.kind != TaskKind::Classification || batch.labels.size() != batch.batch) {
    throw ContractError("task_loss: classifier head needs a labelled classification batch");
  }
  return cross_entropy(logits, std::span<const std::int32_t>(batch.labels));
}

template <typename T>
Tensor<T> task_loss(const TransformerModel<T>& model, const TokenBatch& batch, Rng* dropout_rng) {
  const HeadKind kind = model.config().head;
  if ((kind == HeadKind::LanguageModel) != (batch.kind == TaskKind::CausalLM)) {
    throw ContractError("task_loss: batch kind does not match the model head");
  }
  return task_loss_from_logits(kind, model.forward(batch, dropout_rng).logits, batch);
}

template <typename T>
TransformerModel<T> init_student_from_teacher(const TransformerModel<T>& teacher, const ModelConfig& student_cfg,
                                              const LayerMap& map) {
  const ModelConfig& tc = teacher.config();
  if (tc.hidden_dim != student_cfg.hidden_dim || tc.ffn_dim != student_cfg.ffn_dim ||
      tc.head_count != student_cfg.head_count) {
    throw UnsupportedError("init_student_from_teacher: teacher width " + std::to_string(tc.hidden_dim) +
                           " != student width " + std::to_string(student_cfg.hidden_dim) +
                           "; initialise the student freshly instead");
  }
  if (tc.vocab_size != student_cfg.vocab_size || tc.max_seq_len != student_cfg.max_seq_len ||
      tc.head != student_cfg.head || tc.num_classes != student_cfg.num_classes ||
      tc.tie_embeddings != student_cfg.tie_embeddings) {
    throw ParameterError("init_student_from_teacher: embedding/head configuration differs from the teacher");
  }
  if (map.student_depth() != student_cfg.depth || map.teacher_depth() != tc.depth) {
    throw ParameterError("init_student_from_teacher: layer map does not fit the model depths");
  }
  TransformerModel<T> student = teacher.clone();
  // Rebuild with the student config so depth/dropout are the student's.
  TransformerModel<T> out(student_cfg, 0);
  out.token_embedding() = student.token_embedding();
  out.position_embedding() = student.position_embedding();
  out.head_params() = student.head_params();
  for (std::size_t k = 1; k <= student_cfg.depth; ++k) out.blocks()[k - 1] = student.blocks()[map(k) - 1];
  out.set_trainable(true);
  return out;
}

template <typename T>
std::string parameter_hash(const TransformerModel<T>& model) {
  return sha256_hex(model.to_checkpoint().serialize());
}

#define TED_INSTANTIATE_MODEL(T)                                                                                 \
  template struct LinearParams<T>;                                                                               \
  template struct NormParams<T>;                                                                                 \
  template struct BlockParams<T>;                                                                                \
  template struct HeadParams<T>;                                                                                 \
  template class TransformerModel<T>;                                                                            \
  template Tensor<T> block_forward(const BlockParams<T>&, const ModelConfig&, const Tensor<T>&,                  \
                                   const AttentionMask&, Rng*);                                                  \
  template Tensor<T> head_forward(const HeadParams<T>&, HeadKind, const Tensor<T>&, const Tensor<T>*);           \
  template Tensor<T> task_loss_from_logits(HeadKind, const Tensor<T>&, const TokenBatch&);                       \
  template Tensor<T> task_loss(const TransformerModel<T>&, const TokenBatch&, Rng*);                             \
  template TransformerModel<T> init_student_from_teacher(const TransformerModel<T>&, const ModelConfig&,         \
                                                         const LayerMap&);                                       \
  template std::string parameter_hash(const TransformerModel<T>&);

TED_INSTANTIATE_MODEL(float)
TED_INSTANTIATE_MODEL(double)

}  // namespace ted
