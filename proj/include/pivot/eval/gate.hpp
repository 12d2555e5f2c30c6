#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "pivot/corpus/records.hpp"
#include "pivot/eval/report.hpp"
#include "pivot/losses/losses.hpp"
#include "pivot/model/model.hpp"
#include "pivot/trainer/trainer.hpp"

namespace pivot {

struct AlphaGateReport {
  double clean_mean = 0;      // mean alpha over concept-sharing pairs of two faithful captions
  double corrupted_mean = 0;  // same, where at least one caption describes another scene
  std::size_t clean_pairs = 0, corrupted_pairs = 0;
  double gap() const { return clean_mean - corrupted_mean; }
};

/// Transitive weights on random training batches, split by whether a caption is corrupted.
/// Only pairs whose images share a ground-truth concept are counted.
template <class T>
AlphaGateReport alpha_gate_report(Model<T>& model, const TrainingSet& ts, const GroundTruth& truth, double margin,
                                  std::size_t batch_size, std::size_t batches, std::uint64_t seed) {
  if (ts.train.size() < 2) throw DataError("alpha gate: need at least two training records");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(ts.train.size());
  std::iota(order.begin(), order.end(), 0);
  AlphaGateReport rep;
  double clean = 0, bad = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n = std::min(batch_size, order.size());
    std::vector<std::vector<TokenId>> seqs;
    Tensor<T> feats = Tensor<T>::matrix(n, ts.feature_dim);
    std::vector<const TextRecord*> recs;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = ts.train[order[i]];
      recs.push_back(&r);
      seqs.push_back(r.tokens);
      const float* x = ts.feature_row(r.image);
      for (std::size_t f = 0; f < ts.feature_dim; ++f) feats(i, f) = static_cast<T>(x[f]);
    }
    const auto text = embed_texts(model, seqs);
    const auto img = embed_images(model, feats);
    const auto cross = similarity_matrix(img, text);
    std::vector<T> diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = cross(i, i);
    const auto alpha = transitive_alpha<T>(diag, similarity_matrix(img, img), margin);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ci = truth.image_concepts.at(ts.image_ids[recs[i]->image]);
      const std::set<int> si(ci.begin(), ci.end());
      for (std::size_t j = i + 1; j < n; ++j) {
        const auto& cj = truth.image_concepts.at(ts.image_ids[recs[j]->image]);
        if (std::none_of(cj.begin(), cj.end(), [&](int c) { return si.count(c) > 0; })) continue;
        const bool corrupted = truth.corrupted.count(recs[i]->id) || truth.corrupted.count(recs[j]->id);
        (corrupted ? bad : clean) += static_cast<double>(alpha(i, j));
        ++(corrupted ? rep.corrupted_pairs : rep.clean_pairs);
      }
    }
  }
  rep.clean_mean = rep.clean_pairs ? clean / static_cast<double>(rep.clean_pairs) : 0.0;
  rep.corrupted_mean = rep.corrupted_pairs ? bad / static_cast<double>(rep.corrupted_pairs) : 0.0;
  return rep;
}

inline RetrievalReport to_report(const AlphaGateReport& g) {
  RetrievalReport rep;
  rep.protocol = "alpha-gate";
  rep.metrics = {{"clean_mean", g.clean_mean},
                 {"corrupted_mean", g.corrupted_mean},
                 {"gap", g.gap()},
                 {"clean_pairs", static_cast<double>(g.clean_pairs)},
                 {"corrupted_pairs", static_cast<double>(g.corrupted_pairs)}};
  return rep;
}

}  // namespace pivot
