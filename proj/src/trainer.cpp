// SPDX-License-Identifier: Apache-2.0
#include "ted/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ted/errors.hpp"

namespace ted {

namespace {

constexpr std::uint64_t kOrderTag = 0x4f52444552;
constexpr std::uint64_t kDropoutTag = 0x44524f50;

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Interval {
  double task = 0.0, pred = 0.0, distill = 0.0, per_layer_mean = 0.0, wall_ms = 0.0;
  std::vector<double> layers;
  std::size_t count = 0;

  void add(double t, double p, double d, const std::vector<double>& per_layer, double ms) {
    task += t;
    pred += p;
    distill += d;
    if (!per_layer.empty()) {
      double s = 0.0;
      for (double x : per_layer) s += x;
      per_layer_mean += s / static_cast<double>(per_layer.size());
      if (layers.size() < per_layer.size()) layers.resize(per_layer.size(), 0.0);
      for (std::size_t i = 0; i < per_layer.size(); ++i) layers[i] += per_layer[i];
    }
    wall_ms += ms;
    ++count;
  }

  void save(Metadata& meta) const {
    meta["interval.count"] = std::to_string(count);
    meta["interval.task"] = exact(task);
    meta["interval.pred"] = exact(pred);
    meta["interval.distill"] = exact(distill);
    meta["interval.per_layer_mean"] = exact(per_layer_mean);
    meta["interval.wall_ms"] = exact(wall_ms);
    std::string ls;
    for (double x : layers) ls += (ls.empty() ? "" : ",") + exact(x);
    meta["interval.layers"] = ls;
  }

  void load(const Metadata& meta) {
    auto get = [&](const char* key) {
      auto it = meta.find(key);
      if (it == meta.end()) throw ArtifactError(std::string("train state lacks '") + key + "'");
      return it->second;
    };
    count = std::stoul(get("interval.count"));
    task = std::stod(get("interval.task"));
    pred = std::stod(get("interval.pred"));
    distill = std::stod(get("interval.distill"));
    per_layer_mean = std::stod(get("interval.per_layer_mean"));
    wall_ms = std::stod(get("interval.wall_ms"));
    layers.clear();
    std::stringstream in(get("interval.layers"));
    std::string tok;
    while (std::getline(in, tok, ',')) layers.push_back(std::stod(tok));
  }
};

void truncate_after(const std::filesystem::path& path, std::size_t step) {
  if (path.empty() || !std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      kept += line + "\n";
      first = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= step) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << line << '\n';
}

}  // namespace

std::size_t total_steps(std::size_t num_samples, const OptimHyper& hyper) {
  if (hyper.batch_size == 0) throw ParameterError("total_steps: batch_size must be >= 1");
  return hyper.epochs * ((num_samples + hyper.batch_size - 1) / hyper.batch_size);
}

template <typename T>
LoopResult train_loop(const LoopOptions& opt, const TaskDataset& train, const NamedParams<T>& trainable,
                      const StepFn<T>& step_fn) {
  opt.hyper.validate();
  if (train.size() == 0) throw ValidationError("train_loop: empty training set");
  if (opt.log_every == 0) throw ParameterError("train_loop: log_every must be >= 1");
  const std::size_t bs = opt.hyper.batch_size;
  const std::size_t per_epoch = (train.size() + bs - 1) / bs;
  LoopResult result;
  result.total_steps = total_steps(train.size(), opt.hyper);

  TrainState state;
  state.stage = opt.stage;
  state.seed = opt.hyper.seed;
  Interval acc;

  auto save_state = [&]() {
    if (opt.state_path.empty()) throw ContractError("train_loop: no state path for checkpointing");
    Checkpoint ck;
    ck.meta["artifact"] = "train_state";
    state.save_into(ck);
    acc.save(ck.meta);
    for (const auto& [name, p] : trainable) ck.put("param." + name, p);
    ck.save(opt.state_path);
  };

  if (opt.resume) {
    if (opt.state_path.empty() || !std::filesystem::exists(opt.state_path)) {
      throw ArtifactError("resume requested but no saved state at " + opt.state_path.string());
    }
    const Checkpoint ck = Checkpoint::load(opt.state_path);
    state = TrainState::load_from(ck);
    if (state.stage != opt.stage || state.seed != opt.hyper.seed) {
      throw ArtifactError("saved state belongs to a different stage or seed");
    }
    acc.load(ck.meta);
    for (const auto& [name, p] : trainable) {
      Tensor<T> handle = p;
      ck.load_into("param." + name, handle);
    }
    truncate_after(opt.metrics_path, state.step);
    truncate_after(opt.layers_path, state.step);
  } else {
    if (!opt.metrics_path.empty()) {
      std::filesystem::create_directories(opt.metrics_path.parent_path());
      std::ofstream(opt.metrics_path, std::ios::trunc) << kMetricsHeader << '\n';
    }
    if (!opt.layers_path.empty()) std::filesystem::remove(opt.layers_path);
  }

  std::vector<std::vector<std::size_t>> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  bool logged = false;
  for (std::size_t s = state.step; s < result.total_steps; ++s) {
    const std::size_t epoch = s / per_epoch;
    if (epoch != order_epoch) {
      order = batch_indices(train.size(), bs, derive_seed(opt.hyper.seed ^ kOrderTag, epoch), true);
      order_epoch = epoch;
    }
    const TokenBatch batch = make_batch(train, order[s % per_epoch]);
    Rng dropout_rng(derive_seed(derive_seed(opt.hyper.seed, kDropoutTag), s));
    for (const auto& [name, p] : trainable) Tensor<T>(p).clear_grad();

    const auto t0 = std::chrono::steady_clock::now();
    StepTerms<T> terms = step_fn(batch, dropout_rng);
    terms.total.backward();
    const double lr = lr_schedule(s, result.total_steps, opt.hyper.warmup_ratio, opt.hyper.base_lr);
    adamw_step(trainable, state, opt.hyper, lr);
    for (const auto& [name, p] : trainable) Tensor<T>(p).clear_grad();
    const double ms =
        opt.record_wall_time ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
                             : 0.0;
    if (!std::isfinite(static_cast<double>(terms.total.item()))) {
      throw ValidationError("train_loop: non-finite loss at step " + std::to_string(s + 1));
    }
    acc.add(terms.task, terms.pred, terms.distill, terms.per_layer, ms);

    const std::size_t done = s + 1;
    if (done % opt.log_every == 0 || done == result.total_steps) {
      const double n = static_cast<double>(acc.count);
      if (!opt.metrics_path.empty()) {
        append_line(opt.metrics_path, std::to_string(done) + "," + num(lr) + "," + num(acc.task / n) + "," +
                                          num(acc.pred / n) + "," + num(acc.distill / n) + "," +
                                          num(acc.per_layer_mean / n) + "," + num(acc.wall_ms));
      }
      if (!opt.layers_path.empty() && !acc.layers.empty()) {
        if (!std::filesystem::exists(opt.layers_path)) {
          std::string h = "step";
          for (std::size_t k = 1; k <= acc.layers.size(); ++k) h += ",layer_" + std::to_string(k);
          append_line(opt.layers_path, h);
        }
        std::string row = std::to_string(done);
        for (double x : acc.layers) row += "," + num(x / n);
        append_line(opt.layers_path, row);
      }
      if (!logged) result.first_logged_task = acc.task / n;
      logged = true;
      result.last_logged_task = acc.task / n;
      acc = Interval{};
    }
    result.steps_done = done;
    if (opt.checkpoint_every && done % opt.checkpoint_every == 0 && done < result.total_steps) save_state();
    if (opt.stop_after && done == opt.stop_after && done < result.total_steps) {
      save_state();
      return result;
    }
  }
  result.steps_done = result.total_steps;
  result.completed = true;
  return result;
}

template <typename T>
EvalMetrics evaluate(const TransformerModel<T>& model, const TaskDataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw ValidationError("evaluate: empty dataset");
  const bool lm = model.config().head == HeadKind::LanguageModel;
  if (lm != (data.kind == TaskKind::CausalLM)) throw ContractError("evaluate: dataset does not match the model head");
  TransformerModel<T> frozen = model.clone();
  frozen.set_trainable(false);
  EvalMetrics m;
  double nll = 0.0;
  std::size_t correct = 0;
  for (const auto& idx : batch_indices(data.size(), batch_size, 0, false)) {
    const TokenBatch batch = make_batch(data, idx);
    const ForwardResult<T> fr = frozen.forward(batch);
    const Tensor<T> loss = task_loss_from_logits(frozen.config().head, fr.logits, batch);
    const std::size_t rows = lm ? batch.batch * (batch.length - 1) : batch.batch;
    nll += static_cast<double>(loss.item()) * static_cast<double>(rows);
    m.count += rows;
    if (!lm) {
      const auto logits = fr.logits.values();
      const std::size_t c = fr.logits.dim(1);
      for (std::size_t b = 0; b < batch.batch; ++b) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
          if (logits[b * c + j] > logits[b * c + best]) best = j;
        }
        if (static_cast<std::int32_t>(best) == batch.labels[b]) ++correct;
      }
    }
  }
  m.mean_loss = nll / static_cast<double>(m.count);
  if (lm) {
    m.metric = "perplexity";
    m.value = std::exp(m.mean_loss);
  } else {
    m.metric = "accuracy";
    m.value = static_cast<double>(correct) / static_cast<double>(m.count);
  }
  return m;
}

std::vector<std::vector<double>> read_metrics(const std::filesystem::path& path, std::vector<std::string>* header) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot read " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    if (first) {
      first = false;
      if (header) {
        header->clear();
        while (std::getline(ls, cell, ',')) header->push_back(cell);
      }
      continue;
    }
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

template LoopResult train_loop(const LoopOptions&, const TaskDataset&, const NamedParams<float>&, const StepFn<float>&);
template LoopResult train_loop(const LoopOptions&, const TaskDataset&, const NamedParams<double>&,
                               const StepFn<double>&);
template EvalMetrics evaluate(const TransformerModel<float>&, const TaskDataset&, std::size_t);
template EvalMetrics evaluate(const TransformerModel<double>&, const TaskDataset&, std::size_t);

}  // namespace ted
