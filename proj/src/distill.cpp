// SPDX-License-Identifier: Apache-2.0
#include "ted/distill.hpp"

#include "ted/errors.hpp"
#include "ted/ops.hpp"

namespace ted {

std::string to_string(DistillMode m) {
  switch (m) {
    case DistillMode::FT:
      return "ft";
    case DistillMode::KD:
      return "kd";
    case DistillMode::LWD:
      return "lwd";
    case DistillMode::TED:
      return "ted";
  }
  return "?";
}

DistillMode parse_distill_mode(const std::string& s) {
  if (s == "ft") return DistillMode::FT;
  if (s == "kd") return DistillMode::KD;
  if (s == "lwd") return DistillMode::LWD;
  if (s == "ted") return DistillMode::TED;
  throw ParameterError("unknown distillation mode '" + s + "' (ft|kd|lwd|ted)");
}

std::string to_string(TedVariant v) { return v == TedVariant::MSE ? "mse" : "kl"; }

TedVariant parse_ted_variant(const std::string& s) {
  if (s == "mse") return TedVariant::MSE;
  if (s == "kl") return TedVariant::KL;
  throw ParameterError("unknown ted variant '" + s + "' (mse|kl)");
}

std::string to_string(TeacherFilterInit v) { return v == TeacherFilterInit::Trained ? "trained" : "none"; }

TeacherFilterInit parse_teacher_filter_init(const std::string& s) {
  if (s == "trained") return TeacherFilterInit::Trained;
  if (s == "none") return TeacherFilterInit::None;
  throw ParameterError("unknown teacher filter init '" + s + "' (trained|none)");
}

std::string to_string(StudentFilterInit v) {
  switch (v) {
    case StudentFilterInit::Trained:
      return "trained";
    case StudentFilterInit::Random:
      return "random";
    case StudentFilterInit::None:
      return "none";
  }
  return "?";
}

StudentFilterInit parse_student_filter_init(const std::string& s) {
  if (s == "trained") return StudentFilterInit::Trained;
  if (s == "random") return StudentFilterInit::Random;
  if (s == "none") return StudentFilterInit::None;
  throw ParameterError("unknown student filter init '" + s + "' (trained|random|none)");
}

void DistillConfig::validate() const {
  if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0)) throw ParameterError("distill: alpha1 and alpha2 must be >= 0");
  if (!(temperature > 0.0)) throw ParameterError("distill: temperature must be > 0");
}

DistillConfig DistillConfig::normalized() const {
  DistillConfig c = *this;
  if (mode == DistillMode::FT) c.alpha1 = c.alpha2 = 0.0;
  if (mode == DistillMode::KD) c.alpha2 = 0.0;
  return c;
}

template <typename T>
Tensor<T> pred_distill_loss(const Tensor<T>& logits_t, const Tensor<T>& logits_s, double temperature,
                            bool t2_scaling) {
  if (logits_t.shape() != logits_s.shape()) {
    throw DimensionError("pred_distill_loss: " + shape_str(logits_t.shape()) + " vs " + shape_str(logits_s.shape()));
  }
  if (!(temperature > 0.0)) throw ParameterError("pred_distill_loss: temperature must be > 0");
  const Tensor<T> kl = kl_div(softmax_temp(logits_t.detach(), temperature), softmax_temp(logits_s, temperature));
  return t2_scaling ? scale(kl, static_cast<T>(temperature * temperature)) : kl;
}

template <typename T>
Projections<T> Projections<T>::init(std::size_t count, std::size_t d_s, std::size_t d_t, std::uint64_t seed) {
  Projections p;
  Rng rng(derive_seed(seed, 0x50524f4a));
  for (std::size_t k = 0; k < count; ++k) p.weights.push_back(LinearParams<T>::init(d_s, d_t, rng, false).weight);
  return p;
}

template <typename T>
NamedParams<T> Projections<T>::named_parameters() const {
  NamedParams<T> out;
  for (std::size_t k = 0; k < weights.size(); ++k) out.emplace_back("proj." + std::to_string(k + 1) + ".weight", weights[k]);
  return out;
}

template <typename T>
Checkpoint Projections<T>::to_checkpoint() const {
  Checkpoint ck;
  ck.meta["artifact"] = "projections";
  for (const auto& [name, t] : named_parameters()) ck.put(name, t);
  return ck;
}

namespace {

template <typename T>
const Tensor<T>& hidden_at(const std::vector<Tensor<T>>& hs, std::size_t layer, const char* who) {
  if (layer >= hs.size()) {
    throw IndexError(std::string(who) + ": hidden state " + std::to_string(layer) + " missing (have " +
                     std::to_string(hs.size()) + ")");
  }
  return hs[layer];
}

template <typename T>
Tensor<T> accumulate(const Tensor<T>& total, const Tensor<T>& term) {
  return total.defined() ? add(total, term) : term;
}

}  // namespace

template <typename T>
Tensor<T> layerwise_loss(const std::vector<Tensor<T>>& hidden_t, const std::vector<Tensor<T>>& hidden_s,
                         const Projections<T>& proj, const LayerMap& map, std::vector<double>* per_layer) {
  const std::size_t K = map.student_depth();
  if (K == 0) throw ContractError("layerwise_loss: empty layer map");
  if (per_layer) per_layer->clear();
  Tensor<T> total;
  for (std::size_t k = 1; k <= K; ++k) {
    if (k > proj.weights.size() || !proj.weights[k - 1].defined()) {
      throw ContractError("layerwise_loss: missing projection for layer " + std::to_string(k));
    }
    const Tensor<T> ht = hidden_at(hidden_t, map(k), "layerwise_loss").detach();
    const Tensor<T> term = mse(ht, linear(hidden_at(hidden_s, k, "layerwise_loss"), proj.weights[k - 1]));
    if (per_layer) per_layer->push_back(static_cast<double>(term.item()));
    total = accumulate(total, term);
  }
  return total;
}

template <typename T>
Tensor<T> ted_loss(const std::vector<Tensor<T>>& hidden_t, const std::vector<Tensor<T>>& hidden_s,
                   const FilterBank<T>& bank_t, const FilterBank<T>& bank_s, const LayerMap& map,
                   const TedLossOptions& opt, const AttentionMask* mask, std::vector<double>* per_layer) {
  const std::size_t K = map.student_depth();
  if (K == 0 || bank_t.size() != K || bank_s.size() != K) {
    throw ContractError("ted_loss: filter banks must hold one filter per student layer (" + std::to_string(K) + ")");
  }
  if (!bank_t.is_frozen()) throw FreezeError("ted_loss: teacher filters must be frozen");
  const bool want_heads = opt.variant == TedVariant::KL;
  for (const auto* bank : {&bank_t, &bank_s}) {
    for (const auto& f : bank->filters) {
      if (f.has_head() != want_heads) {
        throw ContractError(want_heads ? "ted_loss: KL variant needs filter heads"
                                       : "ted_loss: MSE variant needs filter heads removed");
      }
    }
  }
  if (per_layer) per_layer->clear();
  Tensor<T> total;
  for (std::size_t k = 1; k <= K; ++k) {
    const Tensor<T> ht = hidden_at(hidden_t, map(k), "ted_loss").detach();
    const Tensor<T>& hs = hidden_at(hidden_s, k, "ted_loss");
    const auto& ft = bank_t.filters[k - 1];
    const auto& fs = bank_s.filters[k - 1];
    Tensor<T> term;
    if (opt.variant == TedVariant::MSE) {
      term = mse(filter_forward(ft, ht, mask).detach(), filter_forward(fs, hs, mask));
    } else {
      term = pred_distill_loss(filter_head_forward(ft, ht, mask), filter_head_forward(fs, hs, mask), opt.temperature,
                               opt.t2_scaling);
    }
    if (per_layer) per_layer->push_back(static_cast<double>(term.item()));
    total = accumulate(total, term);
  }
  return total;
}

template <typename T>
Stage2Terms<T> stage2_objective(const DistillConfig& cfg, const TokenBatch& batch, const Stage2Inputs<T>& in,
                                Rng* dropout_rng) {
  const DistillConfig c = cfg.normalized();
  c.validate();
  if (!in.student) throw ParameterError("stage2_objective: no student model");
  Stage2Terms<T> terms;
  const ForwardResult<T> s = in.student->forward(batch, dropout_rng);
  const Tensor<T> task = task_loss_from_logits(in.student->config().head, s.logits, batch);
  terms.task = static_cast<double>(task.item());
  if (c.mode == DistillMode::FT) {
    terms.total = task;
    return terms;
  }

  if (!in.teacher) throw ParameterError("stage2_objective: mode " + to_string(c.mode) + " needs a teacher");
  if (!in.teacher->is_frozen()) throw FreezeError("stage2_objective: teacher parameters must be frozen");
  const ForwardResult<T> t = in.teacher->forward(batch);
  const Tensor<T> pred = pred_distill_loss(t.logits, s.logits, c.temperature, c.t2_scaling);
  terms.pred = static_cast<double>(pred.item());
  terms.total = add(task, scale(pred, static_cast<T>(c.alpha1)));
  if (c.mode == DistillMode::KD) return terms;

  Tensor<T> distill;
  if (c.mode == DistillMode::LWD) {
    if (!in.projections) throw ParameterError("stage2_objective: lwd mode needs projections");
    distill = layerwise_loss(t.hidden_states, s.hidden_states, *in.projections, c.layer_map, &terms.per_layer);
  } else {
    if (!in.bank_t || !in.bank_s) throw ParameterError("stage2_objective: ted mode needs both filter banks");
    const AttentionMask mask = in.student->mask_for(batch);
    distill = ted_loss(t.hidden_states, s.hidden_states, *in.bank_t, *in.bank_s, c.layer_map,
                       TedLossOptions{c.variant, c.temperature, c.t2_scaling}, &mask, &terms.per_layer);
  }
  terms.distill = static_cast<double>(distill.item());
  terms.total = add(terms.total, scale(distill, static_cast<T>(c.alpha2)));
  return terms;
}

#define TED_INSTANTIATE_DISTILL(T)                                                                              \
  template struct Projections<T>;                                                                               \
  template Tensor<T> pred_distill_loss(const Tensor<T>&, const Tensor<T>&, double, bool);                      \
  template Tensor<T> layerwise_loss(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,              \
                                    const Projections<T>&, const LayerMap&, std::vector<double>*);             \
  template Tensor<T> ted_loss(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,                    \
                              const FilterBank<T>&, const FilterBank<T>&, const LayerMap&,                     \
                              const TedLossOptions&, const AttentionMask*, std::vector<double>*);              \
  template Stage2Terms<T> stage2_objective(const DistillConfig&, const TokenBatch&, const Stage2Inputs<T>&,    \
                                           Rng*);

TED_INSTANTIATE_DISTILL(float)
TED_INSTANTIATE_DISTILL(double)

}  // namespace ted
