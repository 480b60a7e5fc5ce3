// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "ted/data.hpp"
#include "ted/errors.hpp"
#include "ted/model.hpp"
#include "ted/ops.hpp"
#include "ted/optim.hpp"
#include "ted/trainer.hpp"

using namespace ted;

namespace {

// Independent re-statement of the three labelling rules over the decoded content.
int oracle_label(const std::string& text, ClsRule rule, std::size_t classes) {
  std::string content = text.substr(1);
  content.erase(std::remove(content.begin(), content.end(), '_'), content.end());
  if (rule == ClsRule::PatternContainment) return content.find("abc") != std::string::npos;
  if (rule == ClsRule::ParityOfSymbol) return static_cast<int>(std::count(content.begin(), content.end(), 'a') & 1);
  std::map<int, int> hist;
  for (char c : content) {
    if (c - 'a' < static_cast<int>(classes)) ++hist[c - 'a'];
  }
  int best = -1, best_n = -1, ties = 0;
  for (auto [k, n] : hist) {
    if (n > best_n) {
      best = k;
      best_n = n;
      ties = 0;
    } else if (n == best_n) {
      ++ties;
    }
  }
  return ties ? -1 : best;
}

}  // namespace

TEST(LmCorpus, SameSeedSameCorpus) {
  const auto a = gen_lm_corpus(3, 200, 24), b = gen_lm_corpus(3, 200, 24), c = gen_lm_corpus(4, 200, 24);
  EXPECT_EQ(a.first.hash(), b.first.hash());
  EXPECT_EQ(a.second.hash(), b.second.hash());
  EXPECT_NE(a.first.hash(), c.first.hash());
}

TEST(LmCorpus, SplitSizesAndDisjointness) {
  const auto [train, test] = gen_lm_corpus(1, 1000, 32);
  EXPECT_EQ(train.size(), 950u);
  EXPECT_EQ(test.size(), 50u);
  std::set<std::vector<std::int32_t>> seen(train.sequences.begin(), train.sequences.end());
  for (const auto& s : test.sequences) EXPECT_FALSE(seen.count(s));
  for (const auto* d : {&train, &test}) {
    for (const auto& s : d->sequences) {
      ASSERT_EQ(s.size(), 32u);
      for (auto id : s) EXPECT_LT(static_cast<std::size_t>(id), d->vocab.size());
    }
  }
  EXPECT_THROW(gen_lm_corpus(1, 10, kMaxSeqLen + 1), ParameterError);
}

TEST(LmCorpus, TrainedModelBeatsUnigramOracle) {
  const auto [train, test] = gen_lm_corpus(11, 400, 24);
  const std::size_t v = train.vocab.size();
  std::vector<double> freq(v, 1.0);
  double total = static_cast<double>(v);
  for (const auto& s : train.sequences) {
    for (std::size_t i = 1; i < s.size(); ++i) {
      freq[static_cast<std::size_t>(s[i])] += 1.0;
      total += 1.0;
    }
  }
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& s : test.sequences) {
    for (std::size_t i = 1; i < s.size(); ++i, ++n) nll -= std::log(freq[static_cast<std::size_t>(s[i])] / total);
  }
  const double unigram_ppl = std::exp(nll / static_cast<double>(n));

  ModelConfig cfg;
  cfg.depth = 2;
  cfg.hidden_dim = 32;
  cfg.head_count = 2;
  cfg.ffn_dim = 64;
  cfg.vocab_size = v;
  cfg.max_seq_len = 24;
  TransformerModel<float> m(cfg, 2);
  m.set_trainable(true);
  LoopOptions lo;
  lo.hyper.base_lr = 3e-3;
  lo.hyper.batch_size = 16;
  lo.hyper.epochs = 4;
  lo.log_every = 1000;
  train_loop<float>(lo, train, m.named_parameters(), [&](const TokenBatch& b, Rng&) {
    StepTerms<float> t;
    t.total = task_loss(m, b);
    t.task = t.total.item();
    return t;
  });
  const double ppl = evaluate(m, test, 64).value;
  EXPECT_LT(ppl, unigram_ppl) << "unigram " << unigram_ppl;
}

TEST(ClsTask, RuleOracleAgreesOnEverySample) {
  for (auto [rule, classes] : {std::pair{ClsRule::MajoritySymbol, std::size_t{4}}, {ClsRule::MajoritySymbol, 2},
                               {ClsRule::ParityOfSymbol, 2}, {ClsRule::PatternContainment, 2}}) {
    const auto [train, test] = gen_cls_task(8, 300, 12, classes, rule);
    for (const auto* d : {&train, &test}) {
      for (std::size_t i = 0; i < d->size(); ++i) {
        const std::string text = d->vocab.decode(d->sequences[i]);
        EXPECT_EQ(text[0], '^');
        EXPECT_EQ(oracle_label(text, rule, classes), d->labels[i]) << text;
      }
    }
  }
}

TEST(ClsTask, HandCheckedMajorityExamples) {
  EXPECT_EQ(oracle_label("^abbcab", ClsRule::MajoritySymbol, 3), 1);
  EXPECT_EQ(oracle_label("^cccab_", ClsRule::MajoritySymbol, 3), 2);
  EXPECT_EQ(oracle_label("^aabb__", ClsRule::MajoritySymbol, 2), -1);
  const auto [train, test] = gen_cls_task(2, 40, 7, 3, ClsRule::MajoritySymbol);
  for (std::size_t i = 0; i < train.size(); ++i) {
    EXPECT_EQ(oracle_label(train.vocab.decode(train.sequences[i]), ClsRule::MajoritySymbol, 3), train.labels[i]);
  }
}

TEST(ClsTask, ClassesBalancedWithinOne) {
  const auto [train, test] = gen_cls_task(9, 301, 10, 4, ClsRule::MajoritySymbol);
  std::vector<int> hist(4, 0);
  for (auto l : train.labels) ++hist[l];
  for (auto l : test.labels) ++hist[l];
  EXPECT_LE(*std::max_element(hist.begin(), hist.end()) - *std::min_element(hist.begin(), hist.end()), 1);
  EXPECT_THROW(gen_cls_task(9, 10, 10, 3, ClsRule::ParityOfSymbol), ParameterError);
}

// A bag-of-symbols softmax probe learns the majority rule, and falls to chance once labels are shuffled.
TEST(ClsTask, ShuffledLabelsDropProbeToChance) {
  auto [train, test] = gen_cls_task(21, 2000, 16, 2, ClsRule::MajoritySymbol, 0.5);
  const std::size_t v = train.vocab.size();
  auto features = [&](const TaskDataset& d) {
    std::vector<double> x(d.size() * v, 0.0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (auto id : d.sequences[i]) x[i * v + static_cast<std::size_t>(id)] += 1.0 / 16.0;
    }
    return Tensor<double>({d.size(), v}, x);
  };
  auto probe_accuracy = [&](const std::vector<std::int32_t>& train_labels) {
    Tensor<double> w = Tensor<double>::zeros({v, 2}, true), b = Tensor<double>::zeros({2}, true);
    const Tensor<double> xtr = features(train), xte = features(test);
    TrainState state;
    OptimHyper hyper;
    for (int step = 0; step < 300; ++step) {
      w.clear_grad();
      b.clear_grad();
      cross_entropy(linear(xtr, w, b), std::span(train_labels)).backward();
      adamw_step(NamedParams<double>{{"w", w}, {"b", b}}, state, hyper, 0.1);
    }
    const auto logits = linear(xte, w, b).values();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      correct += static_cast<std::int32_t>(logits[2 * i + 1] > logits[2 * i]) == test.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
  };
  EXPECT_GT(probe_accuracy(train.labels), 0.9);
  std::vector<std::int32_t> shuffled = train.labels;
  Rng rng(5);
  for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
  EXPECT_NEAR(probe_accuracy(shuffled), 0.5, 0.05);
}

TEST(Batching, SizesAndOrder) {
  const auto batches = batch_indices(10, 3, 0, false);
  ASSERT_EQ(batches.size(), 4u);
  EXPECT_EQ(batches[0].size(), 3u);
  EXPECT_EQ(batches[1].size(), 3u);
  EXPECT_EQ(batches[2].size(), 3u);
  EXPECT_EQ(batches[3].size(), 1u);
  std::size_t expect = 0;
  for (const auto& b : batches) {
    for (auto i : b) EXPECT_EQ(i, expect++);
  }
  EXPECT_THROW(batch_indices(0, 3, 0, false), ValidationError);
  EXPECT_THROW(batch_indices(5, 0, 0, false), ParameterError);
}

TEST(Batching, ShuffleCoversEverySampleOnce) {
  const auto a = batch_indices(97, 8, 42, true), b = batch_indices(97, 8, 42, true);
  EXPECT_EQ(a, b);
  std::multiset<std::size_t> got;
  for (const auto& batch : a) got.insert(batch.begin(), batch.end());
  std::multiset<std::size_t> want;
  for (std::size_t i = 0; i < 97; ++i) want.insert(i);
  EXPECT_EQ(got, want);
  EXPECT_NE(a, batch_indices(97, 8, 0, false));
}

TEST(Batching, IteratorYieldsAllBatches) {
  const auto [train, test] = gen_lm_corpus(1, 100, 8);
  BatchIterator it(train, 16, 3, true);
  std::size_t rows = 0, count = 0;
  while (auto b = it.next()) {
    rows += b->batch;
    ++count;
  }
  EXPECT_EQ(rows, train.size());
  EXPECT_EQ(count, it.batch_count());
}

TEST(TextExport, RoundTrip) {
  const auto [train, test] = gen_cls_task(4, 50, 10, 3, ClsRule::MajoritySymbol);
  const auto path = std::filesystem::temp_directory_path() / "ted_cls_export.txt";
  export_text(train, path);
  const TaskDataset back = import_text(path, TaskKind::Classification, train.vocab, 3);
  EXPECT_EQ(back.sequences, train.sequences);
  EXPECT_EQ(back.labels, train.labels);
  std::filesystem::remove(path);
}
