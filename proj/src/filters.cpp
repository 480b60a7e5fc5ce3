// SPDX-License-Identifier: Apache-2.0
#include "ted/filters.hpp"

#include <set>
#include <sstream>

#include "ted/errors.hpp"
#include "ted/ops.hpp"

namespace ted {

namespace {

const std::string& meta_at(const Metadata& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw ArtifactError("filter checkpoint metadata lacks '" + key + "'");
  return it->second;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) out.push_back(std::stoul(tok));
  return out;
}

}  // namespace

std::string to_string(FilterArch arch) {
  switch (arch) {
    case FilterArch::LinearProjection:
      return "linear";
    case FilterArch::TwoLayerMLP:
      return "mlp";
    case FilterArch::SubsequentLayers:
      return "subsequent";
    case FilterArch::Identity:
      return "identity";
  }
  return "?";
}

FilterArch parse_filter_arch(const std::string& name) {
  if (name == "linear") return FilterArch::LinearProjection;
  if (name == "mlp") return FilterArch::TwoLayerMLP;
  if (name == "subsequent") return FilterArch::SubsequentLayers;
  if (name == "identity") return FilterArch::Identity;
  throw ParameterError("unknown filter architecture '" + name + "' (linear|mlp|subsequent|identity)");
}

template <typename T>
void TaskAwareFilter<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  auto lin = [&](const std::string& name, const LinearParams<T>& l) {
    if (!l.weight.defined()) return;
    out.emplace_back(prefix + name + ".weight", l.weight);
    if (l.bias.defined()) out.emplace_back(prefix + name + ".bias", l.bias);
  };
  lin("proj", proj);
  lin("proj2", proj2);
  for (std::size_t j = 0; j < layers.size(); ++j) layers[j].collect(prefix + "layer." + std::to_string(j) + ".", out);
  if (head) head->collect(prefix + "head.", out);
}

template <typename T>
TaskAwareFilter<T> TaskAwareFilter<T>::clone() const {
  auto cl = [](const LinearParams<T>& l) {
    return LinearParams<T>{l.weight.defined() ? l.weight.clone() : Tensor<T>{},
                           l.bias.defined() ? l.bias.clone() : Tensor<T>{}};
  };
  TaskAwareFilter f = *this;
  f.proj = cl(proj);
  f.proj2 = cl(proj2);
  f.layers.clear();
  for (const auto& b : layers) f.layers.push_back(b.clone());
  if (head) f.head = head->clone();
  return f;
}

template <typename T>
TaskAwareFilter<T> build_filter(const FilterSpec& spec, const TransformerModel<T>* donor, std::size_t donor_layer) {
  if (spec.in_dim == 0 || spec.out_dim == 0) throw ParameterError("build_filter: dimensions must be >= 1");
  TaskAwareFilter<T> f;
  f.arch = spec.arch;
  f.in_dim = spec.in_dim;
  f.out_dim = spec.out_dim;
  f.head_kind = spec.head;
  Rng rng(derive_seed(spec.seed, 0x46494c54));
  switch (spec.arch) {
    case FilterArch::Identity:
      if (spec.in_dim != spec.out_dim) {
        throw ParameterError("build_filter: identity filter needs in_dim == out_dim (" + std::to_string(spec.in_dim) +
                             " vs " + std::to_string(spec.out_dim) + ")");
      }
      break;
    case FilterArch::LinearProjection:
      f.proj = LinearParams<T>::init(spec.in_dim, spec.out_dim, rng);
      break;
    case FilterArch::TwoLayerMLP:
      f.proj = LinearParams<T>::init(spec.in_dim, spec.out_dim, rng);
      f.proj2 = LinearParams<T>::init(spec.out_dim, spec.out_dim, rng);
      break;
    case FilterArch::SubsequentLayers: {
      if (!donor) throw ParameterError("build_filter: subsequent-layer filter needs a donor model");
      const ModelConfig& dc = donor->config();
      if (spec.in_dim != dc.hidden_dim || spec.out_dim != dc.hidden_dim) {
        throw UnsupportedError("build_filter: subsequent-layer filter needs equal widths (in " +
                               std::to_string(spec.in_dim) + ", out " + std::to_string(spec.out_dim) + ", donor " +
                               std::to_string(dc.hidden_dim) + ")");
      }
      if (spec.subsequent_layers == 0) throw ParameterError("build_filter: subsequent_layers must be >= 1");
      if (donor_layer + spec.subsequent_layers > dc.depth) {
        throw ParameterError("build_filter: layer " + std::to_string(donor_layer) + " has fewer than " +
                             std::to_string(spec.subsequent_layers) + " following layers in a depth-" +
                             std::to_string(dc.depth) + " model");
      }
      f.donor = dc;
      f.donor.dropout_rate = 0.0;
      for (std::size_t j = 0; j < spec.subsequent_layers; ++j) f.layers.push_back(donor->blocks()[donor_layer + j].clone());
      for (auto& b : f.layers) {
        NamedParams<T> ps;
        b.collect("", ps);
        for (auto& [n, t] : ps) t.set_requires_grad(true);
      }
      break;
    }
  }
  if (spec.with_head) {
    if (spec.head_outputs == 0) throw ParameterError("build_filter: head needs >= 1 output");
    f.head = HeadParams<T>::init(spec.out_dim, spec.head_outputs, rng);
  }
  return f;
}

template <typename T>
Tensor<T> filter_forward(const TaskAwareFilter<T>& filter, const Tensor<T>& h, const AttentionMask* mask) {
  if (h.rank() != 3 || h.dim(2) != filter.in_dim) {
    throw DimensionError("filter_forward: input " + shape_str(h.shape()) + " vs in_dim " +
                         std::to_string(filter.in_dim));
  }
  switch (filter.arch) {
    case FilterArch::Identity:
      return h;
    case FilterArch::LinearProjection:
      return filter.proj(h);
    case FilterArch::TwoLayerMLP:
      return filter.proj2(gelu(filter.proj(h)));
    case FilterArch::SubsequentLayers: {
      if (!mask) throw ContractError("filter_forward: subsequent-layer filter needs the attention mask");
      Tensor<T> x = h;
      for (const auto& b : filter.layers) x = block_forward(b, filter.donor, x, *mask);
      return x;
    }
  }
  throw ContractError("filter_forward: unknown architecture");
}

template <typename T>
Tensor<T> filter_head_forward(const TaskAwareFilter<T>& filter, const Tensor<T>& h, const AttentionMask* mask) {
  if (!filter.head) throw ContractError("filter_head_forward: task head has been removed");
  return head_forward(*filter.head, filter.head_kind, filter_forward(filter, h, mask));
}

template <typename T>
NamedParams<T> FilterBank<T>::named_parameters() const {
  NamedParams<T> out;
  for (std::size_t k = 0; k < filters.size(); ++k) filters[k].collect("filter." + std::to_string(k + 1) + ".", out);
  return out;
}

template <typename T>
std::size_t FilterBank<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

template <typename T>
void FilterBank<T>::set_trainable(bool on) {
  for (auto& [name, t] : named_parameters()) t.set_requires_grad(on);
}

template <typename T>
bool FilterBank<T>::is_frozen() const {
  for (const auto& [name, t] : named_parameters()) {
    if (t.requires_grad()) return false;
  }
  return true;
}

template <typename T>
bool FilterBank<T>::has_heads() const {
  if (filters.empty()) return false;
  for (const auto& f : filters) {
    if (!f.has_head()) return false;
  }
  return true;
}

template <typename T>
void FilterBank<T>::detach_heads() {
  for (auto& f : filters) f.detach_head();
}

template <typename T>
FilterBank<T> FilterBank<T>::clone() const {
  FilterBank b = *this;
  for (auto& f : b.filters) f = f.clone();
  return b;
}

template <typename T>
Checkpoint FilterBank<T>::to_checkpoint() const {
  if (filters.empty()) throw ContractError("FilterBank::to_checkpoint: empty bank");
  const auto& f0 = filters.front();
  Checkpoint ck;
  ck.meta["artifact"] = "filters";
  ck.meta["filter.owner"] = owner == BankOwner::Teacher ? "teacher" : "student";
  ck.meta["filter.arch"] = to_string(f0.arch);
  ck.meta["filter.in_dim"] = std::to_string(f0.in_dim);
  ck.meta["filter.out_dim"] = std::to_string(f0.out_dim);
  ck.meta["filter.source_task"] = source_task;
  ck.meta["filter.sources"] = join(source_layers);
  ck.meta["filter.subsequent_layers"] = std::to_string(f0.layers.size());
  ck.meta["filter.head"] = !f0.head ? "none" : f0.head_kind == HeadKind::LanguageModel ? "lm" : "cls";
  ck.meta["filter.head_outputs"] = f0.head ? std::to_string(f0.head->bias.numel()) : "0";
  if (f0.arch == FilterArch::SubsequentLayers) {
    for (const auto& [k, v] : f0.donor.to_metadata()) ck.meta["filter.donor." + k] = v;
  }
  for (const auto& f : filters) {
    if (f.arch != f0.arch || f.in_dim != f0.in_dim || f.out_dim != f0.out_dim || f.has_head() != f0.has_head()) {
      throw ContractError("FilterBank::to_checkpoint: filters in a bank must share one shape");
    }
  }
  for (const auto& [name, t] : named_parameters()) ck.put(name, t);
  return ck;
}

template <typename T>
FilterBank<T> FilterBank<T>::from_checkpoint(const Checkpoint& ck) {
  if (auto it = ck.meta.find("artifact"); it == ck.meta.end() || it->second != "filters") {
    throw ArtifactError("checkpoint does not hold a filter bank");
  }
  FilterBank bank;
  bank.owner = meta_at(ck.meta, "filter.owner") == "teacher" ? BankOwner::Teacher : BankOwner::Student;
  bank.source_task = meta_at(ck.meta, "filter.source_task");
  bank.source_layers = split_sizes(meta_at(ck.meta, "filter.sources"));
  const std::string head = meta_at(ck.meta, "filter.head");
  FilterSpec spec;
  spec.arch = parse_filter_arch(meta_at(ck.meta, "filter.arch"));
  spec.in_dim = std::stoul(meta_at(ck.meta, "filter.in_dim"));
  spec.out_dim = std::stoul(meta_at(ck.meta, "filter.out_dim"));
  spec.with_head = head != "none";
  spec.head = head == "cls" ? HeadKind::Classifier : HeadKind::LanguageModel;
  spec.head_outputs = std::stoul(meta_at(ck.meta, "filter.head_outputs"));
  ModelConfig donor;
  if (spec.arch == FilterArch::SubsequentLayers) {
    Metadata dm;
    const std::string prefix = "filter.donor.";
    for (const auto& [k, v] : ck.meta) {
      if (k.rfind(prefix, 0) == 0) dm[k.substr(prefix.size())] = v;
    }
    donor = ModelConfig::from_metadata(dm);
  }
  const std::size_t n_layers = std::stoul(meta_at(ck.meta, "filter.subsequent_layers"));
  std::set<std::string> expected;
  for (std::size_t k = 0; k < bank.source_layers.size(); ++k) {
    TaskAwareFilter<T> f;
    if (spec.arch == FilterArch::SubsequentLayers) {
      FilterSpec plain = spec;
      plain.arch = FilterArch::Identity;
      f = build_filter<T>(plain);
      f.arch = FilterArch::SubsequentLayers;
      f.donor = donor;
      Rng rng(0);
      for (std::size_t j = 0; j < n_layers; ++j) f.layers.push_back(BlockParams<T>::init(donor, rng));
    } else {
      f = build_filter<T>(spec);
    }
    NamedParams<T> ps;
    f.collect("filter." + std::to_string(k + 1) + ".", ps);
    for (auto& [name, t] : ps) {
      ck.load_into(name, t);
      t.set_requires_grad(false);
      expected.insert(name);
    }
    bank.filters.push_back(std::move(f));
  }
  for (const auto& name : ck.names()) {
    if (!expected.count(name)) throw ArtifactError("filter checkpoint has unexpected blob '" + name + "'");
  }
  return bank;
}

template <typename T>
FilterBank<T> build_filter_bank(const FilterSpec& spec, BankOwner owner, const LayerMap& map,
                                const TransformerModel<T>* model) {
  FilterBank<T> bank;
  bank.owner = owner;
  for (std::size_t k = 1; k <= map.student_depth(); ++k) {
    const std::size_t layer = owner == BankOwner::Teacher ? map(k) : k;
    FilterSpec s = spec;
    s.seed = derive_seed(spec.seed, (owner == BankOwner::Teacher ? 0x1000 : 0x2000) + k);
    bank.source_layers.push_back(layer);
    bank.filters.push_back(build_filter<T>(s, model, layer));
  }
  return bank;
}

template <typename T>
void check_bank_dims(const FilterBank<T>& bank, std::size_t count, std::size_t in_dim, std::size_t out_dim) {
  if (bank.size() != count) {
    throw ArtifactError("filter bank has " + std::to_string(bank.size()) + " filters, expected " +
                        std::to_string(count));
  }
  for (const auto& f : bank.filters) {
    if (f.in_dim != in_dim || f.out_dim != out_dim) {
      throw ArtifactError("filter maps " + std::to_string(f.in_dim) + " -> " + std::to_string(f.out_dim) +
                          ", expected " + std::to_string(in_dim) + " -> " + std::to_string(out_dim));
    }
  }
}

template <typename T>
Tensor<T> stage1_loss(const TransformerModel<T>& model, const FilterBank<T>& bank, const TokenBatch& batch,
                      std::vector<double>* per_layer) {
  if (!model.is_frozen()) throw FreezeError("stage1_loss: backbone parameters must be frozen");
  if (bank.size() == 0) throw ContractError("stage1_loss: empty filter bank");
  const ForwardResult<T> fr = model.forward(batch);
  const AttentionMask mask = model.mask_for(batch);
  if (per_layer) per_layer->clear();
  Tensor<T> total;
  for (std::size_t k = 0; k < bank.size(); ++k) {
    const std::size_t src = bank.source_layers[k];
    if (src >= fr.hidden_states.size()) throw IndexError("stage1_loss: filter reads missing layer " + std::to_string(src));
    const auto& f = bank.filters[k];
    const Tensor<T> loss = task_loss_from_logits(f.head_kind, filter_head_forward(f, fr.hidden_states[src], &mask), batch);
    if (per_layer) per_layer->push_back(static_cast<double>(loss.item()));
    total = total.defined() ? add(total, loss) : loss;
  }
  return total;
}

#define TED_INSTANTIATE_FILTERS(T)                                                                              \
  template struct TaskAwareFilter<T>;                                                                           \
  template struct FilterBank<T>;                                                                                \
  template TaskAwareFilter<T> build_filter(const FilterSpec&, const TransformerModel<T>*, std::size_t);        \
  template Tensor<T> filter_forward(const TaskAwareFilter<T>&, const Tensor<T>&, const AttentionMask*);        \
  template Tensor<T> filter_head_forward(const TaskAwareFilter<T>&, const Tensor<T>&, const AttentionMask*);   \
  template FilterBank<T> build_filter_bank(const FilterSpec&, BankOwner, const LayerMap&,                      \
                                           const TransformerModel<T>*);                                         \
  template void check_bank_dims(const FilterBank<T>&, std::size_t, std::size_t, std::size_t);                 \
  template Tensor<T> stage1_loss(const TransformerModel<T>&, const FilterBank<T>&, const TokenBatch&,          \
                                 std::vector<double>*);

TED_INSTANTIATE_FILTERS(float)
TED_INSTANTIATE_FILTERS(double)

}  // namespace ted
