// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale tasks regenerated from a seed: a character-level language-modelling corpus with
// bracket-matching and copy structure, and synthetic sequence classification.
// Generation uses only the integer path of ted::Rng, so corpora are bit-stable everywhere.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ted {

enum class TaskKind { CausalLM, Classification };

/// Character vocabulary; id 0 is padding (rendered as '_'), symbols follow in the given order.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr char kPadSymbol = '_';

  Vocab() = default;
  explicit Vocab(std::string symbols);

  std::size_t size() const { return symbols_.size() + 1; }
  std::int32_t id(char symbol) const;
  char symbol(std::int32_t id) const;
  const std::string& symbols() const { return symbols_; }

  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;

  bool operator==(const Vocab&) const = default;

 private:
  std::string symbols_;
  std::int32_t lookup_[256] = {};
};

/// Symbols of the bracket/copy language-modelling grammar.
Vocab lm_vocab();
/// '^' (class token, always at position 0) followed by the letters 'a'..'h'.
Vocab cls_vocab();

struct TaskDataset {
  TaskKind kind = TaskKind::CausalLM;
  Vocab vocab;
  std::vector<std::vector<std::int32_t>> sequences;  // all of length seq_len
  std::vector<std::int32_t> labels;                  // classification only
  std::string split;                                 // "train" or "test"
  std::uint64_t seed = 0;
  std::size_t seq_len = 0;
  std::size_t num_classes = 0;

  std::size_t size() const { return sequences.size(); }
  /// SHA-256 over kind, split, sequences and labels.
  std::string hash() const;
};

using DatasetSplit = std::pair<TaskDataset, TaskDataset>;  // train, test

inline constexpr std::size_t kMaxSeqLen = 512;

enum class LmGrammar { BracketCopy };

/// `num_sequences` unique sequences; the first round(n * (1 - test_fraction)) form the train split.
DatasetSplit gen_lm_corpus(std::uint64_t seed, std::size_t num_sequences, std::size_t seq_len,
                           LmGrammar grammar = LmGrammar::BracketCopy, double test_fraction = 0.05);

enum class ClsRule { PatternContainment, ParityOfSymbol, MajoritySymbol };

/// Sequences are "^" + content + padding. Labels are assigned round-robin before generation, so
/// the class histogram over all samples is balanced within one.
///  - PatternContainment (2 classes): 1 iff the content contains "abc".
///  - ParityOfSymbol (2 classes): number of 'a' modulo 2.
///  - MajoritySymbol (2..8 classes): index of the most frequent of the first num_classes letters,
///    generated so that the maximum is unique.
DatasetSplit gen_cls_task(std::uint64_t seed, std::size_t num_samples, std::size_t seq_len, std::size_t num_classes,
                          ClsRule rule, double test_fraction = 0.2);

std::string to_string(ClsRule rule);
ClsRule parse_cls_rule(std::string_view name);

/// Fixed-size slice of a dataset in row-major [batch x length] layout.
struct TokenBatch {
  TaskKind kind = TaskKind::CausalLM;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> labels;  // empty for language modelling
};

TokenBatch make_batch(const TaskDataset& data, std::span<const std::size_t> indices);
TokenBatch make_batch(TaskKind kind, const std::vector<std::vector<std::int32_t>>& sequences,
                      const std::vector<std::int32_t>& labels = {});

/// Index batches covering every sample exactly once; shuffled with a Fisher-Yates pass seeded by
/// `seed` when requested. The last batch may be short.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t num_samples, std::size_t batch_size,
                                                    std::uint64_t seed, bool shuffle);

class BatchIterator {
 public:
  BatchIterator(const TaskDataset& data, std::size_t batch_size, std::uint64_t seed, bool shuffle);
  std::optional<TokenBatch> next();
  std::size_t batch_count() const { return batches_.size(); }

 private:
  const TaskDataset* data_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t cursor_ = 0;
};

/// One sequence per line (padding as '_'); classification lines are prefixed "label<TAB>".
void export_text(const TaskDataset& data, const std::filesystem::path& path);
TaskDataset import_text(const std::filesystem::path& path, TaskKind kind, const Vocab& vocab,
                        std::size_t num_classes = 0, const std::string& split = "train");

}  // namespace ted
