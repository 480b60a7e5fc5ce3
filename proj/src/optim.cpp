// SPDX-License-Identifier: Apache-2.0
#include "ted/optim.hpp"

#include <cmath>
#include <iostream>

#include "ted/errors.hpp"

namespace ted {

void OptimHyper::validate() const {
  if (!(base_lr >= 0.0)) throw ParameterError("optim: base_lr must be >= 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ParameterError("optim: warmup_ratio must lie in [0, 1)");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ParameterError("optim: betas must lie in (0, 1)");
  }
  if (!(epsilon > 0.0)) throw ParameterError("optim: epsilon must be > 0");
  if (!(weight_decay >= 0.0)) throw ParameterError("optim: weight_decay must be >= 0");
  if (batch_size == 0) throw ParameterError("optim: batch_size must be >= 1");
  if (epochs == 0) throw ParameterError("optim: epochs must be >= 1");
  if (!(grad_clip >= 0.0)) throw ParameterError("optim: grad_clip must be >= 0");
}

double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_ratio, double base_lr) {
  if (step > total_steps) {
    static bool warned = false;
    if (!warned) {
      std::cerr << "warning: lr_schedule step " << step << " past total " << total_steps << ", using 0\n";
      warned = true;
    }
    return 0.0;
  }
  const double total = static_cast<double>(total_steps);
  const double warmup = warmup_ratio * total;
  const double s = static_cast<double>(step);
  if (s < warmup) return base_lr * s / warmup;
  if (total <= warmup) return 0.0;
  return base_lr * (total - s) / (total - warmup);
}

void TrainState::save_into(Checkpoint& ck) const {
  ck.meta["state.step"] = std::to_string(step);
  ck.meta["state.stage"] = std::to_string(static_cast<int>(stage));
  ck.meta["state.seed"] = std::to_string(seed);
  std::string fz;
  for (const auto& n : frozen) fz += (fz.empty() ? "" : ",") + n;
  ck.meta["state.frozen"] = fz;
  for (const auto& [name, vals] : m) ck.put("adam.m." + name, Tensor<double>({vals.size()}, vals));
  for (const auto& [name, vals] : v) ck.put("adam.v." + name, Tensor<double>({vals.size()}, vals));
}

TrainState TrainState::load_from(const Checkpoint& ck) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw ArtifactError("train state lacks '" + key + "'");
    return it->second;
  };
  TrainState s;
  s.step = std::stoull(get("state.step"));
  s.stage = static_cast<Stage>(std::stoi(get("state.stage")));
  s.seed = std::stoull(get("state.seed"));
  const std::string& fz = get("state.frozen");
  std::size_t pos = 0;
  while (pos < fz.size()) {
    const auto comma = fz.find(',', pos);
    const auto end = comma == std::string::npos ? fz.size() : comma;
    s.frozen.insert(fz.substr(pos, end - pos));
    pos = end + 1;
  }
  for (const auto& name : ck.names()) {
    if (name.rfind("adam.m.", 0) == 0) {
      auto t = ck.get<double>(name);
      s.m[name.substr(7)] = {t.values().begin(), t.values().end()};
    } else if (name.rfind("adam.v.", 0) == 0) {
      auto t = ck.get<double>(name);
      s.v[name.substr(7)] = {t.values().begin(), t.values().end()};
    }
  }
  return s;
}

template <typename T>
double grad_norm(const NamedParams<T>& params) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <typename T>
void adamw_step(const NamedParams<T>& params, TrainState& state, const OptimHyper& hyper, double lr) {
  double clip = 1.0;
  if (hyper.grad_clip > 0.0) {
    const double norm = grad_norm(params);
    if (norm > hyper.grad_clip) clip = hyper.grad_clip / norm;
  }
  const std::size_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  const double decay = 1.0 - lr * hyper.weight_decay;

  for (const auto& [name, p] : params) {
    const bool frozen = !p.requires_grad() || state.frozen.count(name);
    if (frozen) {
      if (p.has_grad()) throw FreezeError("adamw_step: frozen parameter '" + name + "' carries a gradient");
      continue;
    }
    if (!p.has_grad()) throw ContractError("adamw_step: trainable parameter '" + name + "' has no gradient");
    auto g = p.grad();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    if (m.size() != g.size()) throw ContractError("adamw_step: moment size mismatch for '" + name + "'");
    Tensor<T> handle = p;
    auto w = handle.mutable_values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = static_cast<double>(g[i]) * clip;
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      const double updated = static_cast<double>(w[i]) * decay - lr * mhat / (std::sqrt(vhat) + hyper.epsilon);
      w[i] = static_cast<T>(updated);
    }
  }
  state.step = t;
}

template double grad_norm(const NamedParams<float>&);
template double grad_norm(const NamedParams<double>&);
template void adamw_step(const NamedParams<float>&, TrainState&, const OptimHyper&, double);
template void adamw_step(const NamedParams<double>&, TrainState&, const OptimHyper&, double);

}  // namespace ted
