// SPDX-License-Identifier: Apache-2.0
#include "ted/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ted/errors.hpp"
#include "ted/hash.hpp"
#include "ted/rng.hpp"

namespace ted {

Vocab::Vocab(std::string symbols) : symbols_(std::move(symbols)) {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    const auto c = static_cast<unsigned char>(symbols_[i]);
    if (symbols_[i] == kPadSymbol || lookup_[c] != 0) {
      throw ValidationError(std::string("vocab: duplicate or reserved symbol '") + symbols_[i] + "'");
    }
    lookup_[c] = static_cast<std::int32_t>(i + 1);
  }
}

std::int32_t Vocab::id(char symbol) const {
  if (symbol == kPadSymbol) return kPad;
  const std::int32_t v = lookup_[static_cast<unsigned char>(symbol)];
  if (v == 0) throw ValidationError(std::string("vocab: unknown symbol '") + symbol + "'");
  return v;
}

char Vocab::symbol(std::int32_t id) const {
  if (id == kPad) return kPadSymbol;
  if (id < 0 || static_cast<std::size_t>(id) >= size()) throw IndexError("vocab: id " + std::to_string(id));
  return symbols_[static_cast<std::size_t>(id - 1)];
}

std::vector<std::int32_t> Vocab::encode(std::string_view text) const {
  std::vector<std::int32_t> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(id(c));
  return out;
}

std::string Vocab::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(symbol(i));
  return out;
}

Vocab lm_vocab() {
  return Vocab("abcdefgh()[]{}=.");
}

Vocab cls_vocab() {
  return Vocab("^abcdefgh");
}

std::string TaskDataset::hash() const {
  std::string text = (kind == TaskKind::CausalLM ? "lm|" : "cls|") + split + "|" + vocab.symbols() + "\n";
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    if (!labels.empty()) text += std::to_string(labels[i]) + '\t';
    text += vocab.decode(sequences[i]);
    text += '\n';
  }
  return sha256_hex(text);
}

namespace {

constexpr std::string_view kLetters = "abcdefgh";
constexpr std::string_view kOpen = "([{";
constexpr std::string_view kClose = ")]}";

char pick(Rng& rng, std::string_view from) {
  return from[rng.below(from.size())];
}

void bracket_phrase(Rng& rng, std::string& out, int depth) {
  const std::size_t kind = rng.below(kOpen.size());
  out.push_back(kOpen[kind]);
  const std::size_t items = 1 + rng.below(3);
  for (std::size_t i = 0; i < items; ++i) {
    if (depth < 3 && rng.below(3) == 0) {
      bracket_phrase(rng, out, depth + 1);
    } else {
      out.push_back(pick(rng, kLetters));
    }
  }
  out.push_back(kClose[kind]);
}

void copy_phrase(Rng& rng, std::string& out) {
  std::string word;
  const std::size_t len = 2 + rng.below(3);
  for (std::size_t i = 0; i < len; ++i) word.push_back(pick(rng, kLetters));
  out += word;
  out.push_back('=');
  out += word;
  out.push_back('.');
}

std::string lm_sequence(Rng& rng, std::size_t seq_len) {
  std::string s;
  while (s.size() < seq_len) {
    if (rng.below(2) == 0) {
      bracket_phrase(rng, s, 0);
    } else {
      copy_phrase(rng, s);
    }
  }
  s.resize(seq_len);
  return s;
}

std::size_t train_count(std::size_t n, double test_fraction) {
  if (test_fraction < 0.0 || test_fraction >= 1.0) throw ParameterError("test_fraction must lie in [0, 1)");
  return n - static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
}

DatasetSplit split_dataset(TaskDataset all, double test_fraction) {
  const std::size_t n_train = train_count(all.size(), test_fraction);
  TaskDataset train = all;
  TaskDataset test = all;
  train.split = "train";
  test.split = "test";
  train.sequences.assign(all.sequences.begin(), all.sequences.begin() + static_cast<std::ptrdiff_t>(n_train));
  test.sequences.assign(all.sequences.begin() + static_cast<std::ptrdiff_t>(n_train), all.sequences.end());
  if (!all.labels.empty()) {
    train.labels.assign(all.labels.begin(), all.labels.begin() + static_cast<std::ptrdiff_t>(n_train));
    test.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(n_train), all.labels.end());
  }
  return {std::move(train), std::move(test)};
}

int rule_label(ClsRule rule, std::string_view content, std::size_t num_classes) {
  switch (rule) {
    case ClsRule::PatternContainment:
      return content.find("abc") != std::string_view::npos ? 1 : 0;
    case ClsRule::ParityOfSymbol:
      return static_cast<int>(std::count(content.begin(), content.end(), 'a') % 2);
    case ClsRule::MajoritySymbol: {
      std::vector<std::size_t> counts(num_classes, 0);
      for (char c : content) {
        const auto pos = kLetters.find(c);
        if (pos < num_classes) ++counts[pos];
      }
      const auto best = std::max_element(counts.begin(), counts.end());
      if (std::count(counts.begin(), counts.end(), *best) != 1) return -1;
      return static_cast<int>(best - counts.begin());
    }
  }
  return -1;
}

}  // namespace

DatasetSplit gen_lm_corpus(std::uint64_t seed, std::size_t num_sequences, std::size_t seq_len, LmGrammar grammar,
                           double test_fraction) {
  if (seq_len < 2 || seq_len > kMaxSeqLen) {
    throw ParameterError("gen_lm_corpus: seq_len must lie in [2, " + std::to_string(kMaxSeqLen) + "]");
  }
  if (num_sequences == 0) throw ParameterError("gen_lm_corpus: num_sequences must be positive");
  (void)grammar;
  TaskDataset all;
  all.kind = TaskKind::CausalLM;
  all.vocab = lm_vocab();
  all.seed = seed;
  all.seq_len = seq_len;
  Rng rng(derive_seed(seed, 0x4c4d));
  std::set<std::string> seen;
  std::size_t attempts = 0;
  while (all.sequences.size() < num_sequences) {
    if (++attempts > 100 * num_sequences) throw ParameterError("gen_lm_corpus: cannot produce enough unique sequences");
    std::string s = lm_sequence(rng, seq_len);
    if (!seen.insert(s).second) continue;
    all.sequences.push_back(all.vocab.encode(s));
  }
  return split_dataset(std::move(all), test_fraction);
}

std::string to_string(ClsRule rule) {
  switch (rule) {
    case ClsRule::PatternContainment:
      return "pattern";
    case ClsRule::ParityOfSymbol:
      return "parity";
    case ClsRule::MajoritySymbol:
      return "majority";
  }
  return "?";
}

ClsRule parse_cls_rule(std::string_view name) {
  if (name == "pattern") return ClsRule::PatternContainment;
  if (name == "parity") return ClsRule::ParityOfSymbol;
  if (name == "majority") return ClsRule::MajoritySymbol;
  throw ParameterError("unknown classification rule '" + std::string(name) + "'");
}

DatasetSplit gen_cls_task(std::uint64_t seed, std::size_t num_samples, std::size_t seq_len, std::size_t num_classes,
                          ClsRule rule, double test_fraction) {
  if (seq_len > kMaxSeqLen) throw ParameterError("gen_cls_task: seq_len exceeds " + std::to_string(kMaxSeqLen));
  if (seq_len < 5) throw ParameterError("gen_cls_task: class rules need seq_len >= 5");
  if (num_samples == 0) throw ParameterError("gen_cls_task: num_samples must be positive");
  if (rule != ClsRule::MajoritySymbol && num_classes != 2) {
    throw ParameterError("gen_cls_task: rule '" + to_string(rule) + "' defines exactly 2 classes, asked for " +
                         std::to_string(num_classes));
  }
  if (rule == ClsRule::MajoritySymbol && (num_classes < 2 || num_classes > kLetters.size())) {
    throw ParameterError("gen_cls_task: majority rule supports 2..8 classes");
  }
  const std::size_t max_content = seq_len - 1;
  const std::size_t min_content = std::max<std::size_t>(4, max_content / 2);

  TaskDataset all;
  all.kind = TaskKind::Classification;
  all.vocab = cls_vocab();
  all.seed = seed;
  all.seq_len = seq_len;
  all.num_classes = num_classes;
  Rng rng(derive_seed(seed, 0x434c53));

  std::vector<std::int32_t> targets(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) targets[i] = static_cast<std::int32_t>(i % num_classes);
  for (std::size_t i = num_samples; i > 1; --i) std::swap(targets[i - 1], targets[rng.below(i)]);

  std::set<std::string> seen;
  for (std::int32_t target : targets) {
    std::string content;
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt > 100000) throw ParameterError("gen_cls_task: cannot satisfy class balance for this rule");
      const std::size_t len = min_content + rng.below(max_content - min_content + 1);
      content.clear();
      for (std::size_t j = 0; j < len; ++j) content.push_back(pick(rng, kLetters));
      if (rule_label(rule, content, num_classes) == target && !seen.count(content)) break;
    }
    seen.insert(content);
    std::string text = "^" + content;
    text.resize(seq_len, Vocab::kPadSymbol);
    all.sequences.push_back(all.vocab.encode(text));
    all.labels.push_back(target);
  }
  return split_dataset(std::move(all), test_fraction);
}

TokenBatch make_batch(TaskKind kind, const std::vector<std::vector<std::int32_t>>& sequences,
                      const std::vector<std::int32_t>& labels) {
  if (sequences.empty()) throw ValidationError("make_batch: no sequences");
  TokenBatch b;
  b.kind = kind;
  b.batch = sequences.size();
  b.length = sequences.front().size();
  b.ids.reserve(b.batch * b.length);
  for (const auto& s : sequences) {
    if (s.size() != b.length) throw DimensionError("make_batch: sequences differ in length");
    b.ids.insert(b.ids.end(), s.begin(), s.end());
  }
  if (kind == TaskKind::Classification) {
    if (labels.size() != sequences.size()) throw ValidationError("make_batch: one label per sequence required");
    b.labels = labels;
  }
  return b;
}

TokenBatch make_batch(const TaskDataset& data, std::span<const std::size_t> indices) {
  std::vector<std::vector<std::int32_t>> seqs;
  std::vector<std::int32_t> labels;
  seqs.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= data.size()) throw IndexError("make_batch: sample " + std::to_string(i));
    seqs.push_back(data.sequences[i]);
    if (data.kind == TaskKind::Classification) labels.push_back(data.labels[i]);
  }
  return make_batch(data.kind, seqs, labels);
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t num_samples, std::size_t batch_size,
                                                    std::uint64_t seed, bool shuffle) {
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
  if (num_samples == 0) throw ValidationError("cannot batch an empty dataset");
  std::vector<std::size_t> order(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) order[i] = i;
  if (shuffle) {
    Rng rng(derive_seed(seed, 0x5348));
    for (std::size_t i = num_samples; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < num_samples; start += batch_size) {
    const std::size_t end = std::min(num_samples, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

BatchIterator::BatchIterator(const TaskDataset& data, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : data_(&data), batches_(batch_indices(data.size(), batch_size, seed, shuffle)) {}

std::optional<TokenBatch> BatchIterator::next() {
  if (cursor_ >= batches_.size()) return std::nullopt;
  return make_batch(*data_, batches_[cursor_++]);
}

void export_text(const TaskDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write " + path.string());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.kind == TaskKind::Classification) out << data.labels[i] << '\t';
    out << data.vocab.decode(data.sequences[i]) << '\n';
  }
}

TaskDataset import_text(const std::filesystem::path& path, TaskKind kind, const Vocab& vocab, std::size_t num_classes,
                        const std::string& split) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open " + path.string());
  TaskDataset d;
  d.kind = kind;
  d.vocab = vocab;
  d.split = split;
  d.num_classes = num_classes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::string_view text = line;
    if (kind == TaskKind::Classification) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw ValidationError("import_text: missing label in '" + line + "'");
      const int label = std::stoi(line.substr(0, tab));
      if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
        throw ValidationError("import_text: label out of range in '" + line + "'");
      }
      d.labels.push_back(label);
      text = text.substr(tab + 1);
    }
    d.sequences.push_back(vocab.encode(text));
    if (d.seq_len == 0) d.seq_len = text.size();
    if (text.size() != d.seq_len) throw DimensionError("import_text: sequences differ in length");
  }
  return d;
}

}  // namespace ted
