#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pivot/corpus/records.hpp"
#include "pivot/diffcore/graph.hpp"
#include "pivot/diffcore/params.hpp"
#include "pivot/eval/report.hpp"
#include "pivot/model/model.hpp"

namespace pivot {

struct ProbeSample {
  std::vector<TokenId> tokens;
  std::size_t lang = 0;
  int label = 0;  // 1 = second half taken from another sentence
};

/// For each language, half the sentences keep their tokens and half get their second half
/// replaced by the second half of another same-language sentence of the closest length.
inline std::vector<ProbeSample> make_correspondence_task(const std::vector<std::vector<std::vector<TokenId>>>& by_lang,
                                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ProbeSample> out;
  for (std::size_t l = 0; l < by_lang.size(); ++l) {
    const auto& sents = by_lang[l];
    if (sents.size() < 2) throw DataError("correspondence probe: a language needs at least two sentences");
    std::vector<std::size_t> order(sents.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t swapped = sents.size() / 2;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto& s = sents[order[k]];
      ProbeSample p{s, l, 0};
      if (k < swapped) {
        // donor: closest length, first in shuffled order; never the sentence itself
        std::size_t best = SIZE_MAX, best_gap = SIZE_MAX;
        for (std::size_t m : order) {
          if (m == order[k] || sents[m] == s) continue;
          const std::size_t gap = sents[m].size() > s.size() ? sents[m].size() - s.size() : s.size() - sents[m].size();
          if (gap < best_gap) {
            best_gap = gap;
            best = m;
          }
        }
        if (best == SIZE_MAX) best = order[(k + 1) % order.size()];
        const auto& d = sents[best];
        const std::size_t keep = 1 + (s.size() - 1) / 2;   // [SEQ] plus the first half
        const std::size_t from = 1 + (d.size() - 1) / 2;
        p.tokens.assign(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(keep));
        p.tokens.insert(p.tokens.end(), d.begin() + static_cast<std::ptrdiff_t>(from), d.end());
        p.label = 1;
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

/// (seen - unseen) / (seen - 0.5): the share of above-chance accuracy lost on unseen languages.
inline double relative_decrease(double acc_seen, double acc_unseen) {
  if (acc_seen == 0.5) throw NumericError("relative_decrease: seen accuracy equals chance");
  return (acc_seen - acc_unseen) / (acc_seen - 0.5);
}

struct ProbeConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double acc_seen = 0, acc_unseen = 0, relative_decrease = 0;
  std::size_t train = 0, test_seen = 0, test_unseen = 0;
  double label_balance = 0;  // fraction of positive labels over all samples
  std::vector<std::string> seen, unseen;
};

namespace detail {

/// One-head transformer layer and a two-way head over frozen hidden states.
template <class T>
struct ProbeNet {
  Model<T> net;

  explicit ProbeNet(std::size_t hidden, std::size_t max_len, std::uint64_t seed)
      : net([&] {
          ModelConfig c;
          c.layers = 1;
          c.heads = 1;
          c.hidden = hidden;
          c.head_dim = 2;
          c.max_len = max_len;
          c.vocab_size = special::count + 1;
          c.image_feat_dim = 1;
          c.seed = seed;
          return c;
        }()) {}

  Var<T> logits(Graph<T>& g, const Tensor<T>& frozen, const TextBatch& b) const {
    auto h = net.transformer_block(g, 0, g.constant(frozen), b);
    h = layer_norm_rows(h, g.param("final_ln.g"), g.param("final_ln.b"));
    std::vector<std::size_t> first(b.batch);
    for (std::size_t i = 0; i < b.batch; ++i) first[i] = i * b.seq_len;
    return add_row(matmul(gather_rows(h, std::move(first)), g.param("text_head.w")), g.param("text_head.b"));
  }
};

}  // namespace detail

/// Train the probe on the first half of the (alphabetically sorted) languages and test on
/// held-out sentences of those languages and on the remaining languages.
template <class T>
ProbeResult sentence_correspondence_probe(Model<T>& model, std::vector<std::string> languages,
                                          const std::map<std::string, std::vector<std::vector<TokenId>>>& sentences,
                                          const ProbeConfig& pc) {
  if (languages.size() < 2) throw DataError("correspondence probe: need at least two languages");
  std::sort(languages.begin(), languages.end());
  std::vector<std::vector<std::vector<TokenId>>> by_lang;
  for (const auto& l : languages) {
    auto it = sentences.find(l);
    if (it == sentences.end()) throw DataError("correspondence probe: no sentences for '" + l + "'");
    by_lang.push_back(it->second);
  }
  const std::size_t n_seen = languages.size() / 2;
  ProbeResult res;
  res.seen.assign(languages.begin(), languages.begin() + static_cast<std::ptrdiff_t>(n_seen));
  res.unseen.assign(languages.begin() + static_cast<std::ptrdiff_t>(n_seen), languages.end());
  auto samples = make_correspondence_task(by_lang, pc.seed);
  double pos = 0;
  for (const auto& s : samples) pos += s.label;
  res.label_balance = pos / static_cast<double>(samples.size());

  std::mt19937_64 rng(pc.seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<const ProbeSample*> train, test_seen, test_unseen;
  {
    std::vector<const ProbeSample*> seen;
    for (const auto& s : samples) (s.lang < n_seen ? seen : test_unseen).push_back(&s);
    std::shuffle(seen.begin(), seen.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(pc.train_fraction * static_cast<double>(seen.size())));
    train.assign(seen.begin(), seen.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_seen.assign(seen.begin() + static_cast<std::ptrdiff_t>(n_train), seen.end());
  }
  res.train = train.size();
  res.test_seen = test_seen.size();
  res.test_unseen = test_unseen.size();

  const auto& mc = model.config();
  detail::ProbeNet<T> probe(mc.hidden, mc.max_len, pc.seed);
  auto frozen = [&](const std::vector<const ProbeSample*>& part, TextBatch& b) {
    std::vector<std::vector<TokenId>> seqs;
    for (const auto* s : part) seqs.push_back(s->tokens);
    b = make_text_batch(seqs, mc.max_len, mc.vocab_size);
    Graph<T> g(&model.params(), false);
    return model.encode_text(g, b).hidden.value();
  };
  const AdamConfig adam{pc.lr, 0.9, 0.999, 1e-8};
  for (std::size_t e = 0; e < pc.epochs; ++e) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t s = 0; s < train.size(); s += pc.batch_size) {
      std::vector<const ProbeSample*> part(train.begin() + static_cast<std::ptrdiff_t>(s),
                                           train.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), s + pc.batch_size)));
      TextBatch b;
      const auto h = frozen(part, b);
      probe.net.params().zero_grad();
      Graph<T> g(&probe.net.params());
      Tensor<T> onehot = Tensor<T>::matrix(part.size(), 2);
      for (std::size_t i = 0; i < part.size(); ++i) onehot(i, static_cast<std::size_t>(part[i]->label)) = T{1};
      auto loss = scale(weighted_sum(log_softmax_rows(probe.logits(g, h, b)), std::move(onehot)),
                        T(-1) / static_cast<T>(part.size()));
      g.backward(loss);
      adam_step(probe.net.params(), adam);
    }
  }
  auto accuracy = [&](const std::vector<const ProbeSample*>& part) {
    if (part.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < part.size(); s += 256) {
      std::vector<const ProbeSample*> chunk(part.begin() + static_cast<std::ptrdiff_t>(s),
                                            part.begin() + static_cast<std::ptrdiff_t>(std::min(part.size(), s + 256)));
      TextBatch b;
      const auto h = frozen(chunk, b);
      Graph<T> g(&probe.net.params(), false);
      const auto z = probe.logits(g, h, b).value();
      for (std::size_t i = 0; i < chunk.size(); ++i) correct += (z(i, 1) > z(i, 0)) == (chunk[i]->label == 1);
    }
    return static_cast<double>(correct) / static_cast<double>(part.size());
  };
  res.acc_seen = accuracy(test_seen);
  res.acc_unseen = accuracy(test_unseen);
  res.relative_decrease = res.acc_seen != 0.5 ? relative_decrease(res.acc_seen, res.acc_unseen) : 0.0;
  return res;
}

inline RetrievalReport to_report(const ProbeResult& r) {
  RetrievalReport rep;
  rep.protocol = "correspondence-probe";
  rep.metrics = {{"acc_seen", r.acc_seen},
                 {"acc_unseen", r.acc_unseen},
                 {"relative_decrease", r.relative_decrease},
                 {"label_balance", r.label_balance}};
  rep.meta = {{"seen", r.seen}, {"unseen", r.unseen}, {"train", r.train}, {"test_seen", r.test_seen},
              {"test_unseen", r.test_unseen}};
  return rep;
}

}  // namespace pivot
