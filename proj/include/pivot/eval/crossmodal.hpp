#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pivot/corpus/records.hpp"
#include "pivot/eval/report.hpp"
#include "pivot/log.hpp"
#include "pivot/model/model.hpp"

namespace pivot {

struct RecallAtK {
  double r1 = 0, r5 = 0, r10 = 0;
};

struct CrossmodalResult {
  RecallAtK text_to_image, image_to_text;
};

namespace detail {

/// Rank (0-based) of candidate `target` in row `q` of scores; ties go to the lower index.
inline std::size_t rank_of(const Tensor<double>& s, std::size_t q, std::size_t target, bool by_column) {
  const std::size_t n = by_column ? s.rows() : s.cols();
  auto at = [&](std::size_t c) { return by_column ? s(c, q) : s(q, c); };
  const double t = at(target);
  std::size_t r = 0;
  for (std::size_t c = 0; c < n; ++c)
    if (at(c) > t || (at(c) == t && c < target)) ++r;
  return r;
}

}  // namespace detail

/// Recall@{1,5,10} where row i of `scores` (text i vs image j) has its positive on the diagonal.
inline CrossmodalResult crossmodal_from_scores(const Tensor<double>& scores) {
  const std::size_t n = scores.rows();
  if (scores.cols() != n || n == 0) throw DataError("crossmodal retrieval: need a non-empty square score matrix");
  CrossmodalResult res;
  auto tally = [&](RecallAtK& r, std::size_t rank) {
    r.r1 += rank < 1;
    r.r5 += rank < 5;
    r.r10 += rank < 10;
  };
  for (std::size_t i = 0; i < n; ++i) {
    tally(res.text_to_image, detail::rank_of(scores, i, i, false));
    tally(res.image_to_text, detail::rank_of(scores, i, i, true));
  }
  for (auto* r : {&res.text_to_image, &res.image_to_text}) {
    r->r1 /= static_cast<double>(n);
    r->r5 /= static_cast<double>(n);
    r->r10 /= static_cast<double>(n);
  }
  return res;
}

template <class T>
CrossmodalResult crossmodal_from_embeddings(const Tensor<T>& text, const Tensor<T>& images) {
  return crossmodal_from_scores(similarity_matrix(text, images).template cast<double>());
}

/// Per language, sample up to `pairs_per_language` (caption, image) pairs from the groups and
/// retrieve in both directions; recalls are averaged over languages.
template <class T>
RetrievalReport crossmodal_retrieval_eval(Model<T>& model, const Dataset& data, const std::vector<ParaphraseGroup>& groups,
                                          const std::vector<std::string>& languages, std::size_t pairs_per_language,
                                          std::uint64_t seed) {
  RetrievalReport rep;
  rep.protocol = "crossmodal-retrieval";
  rep.languages = languages;
  const char* names[] = {"t2i_r1", "t2i_r5", "t2i_r10", "i2t_r1", "i2t_r5", "i2t_r10"};
  for (const char* n : names) rep.metrics[n] = 0.0;
  std::size_t counted = 0;
  for (std::size_t l = 0; l < languages.size(); ++l) {
    std::vector<const CaptionRecord*> caps;
    for (const auto& g : groups) {
      auto it = g.captions.find(languages[l]);
      if (it != g.captions.end()) caps.push_back(&data.caption(it->second));
    }
    if (caps.size() < pairs_per_language) {
      logging::warn("crossmodal retrieval: language '" + languages[l] + "' has " + std::to_string(caps.size()) +
                    " pairs, fewer than the " + std::to_string(pairs_per_language) + " requested; using all");
    } else {
      std::mt19937_64 rng(seed + l);
      std::shuffle(caps.begin(), caps.end(), rng);
      caps.resize(pairs_per_language);
    }
    if (caps.empty()) continue;
    std::vector<std::vector<TokenId>> seqs;
    const std::size_t F = data.feature_dim();
    Tensor<T> feats = Tensor<T>::matrix(caps.size(), F);
    for (std::size_t i = 0; i < caps.size(); ++i) {
      seqs.push_back(caps[i]->tokens);
      const auto& f = data.image(caps[i]->image_id).features;
      for (std::size_t k = 0; k < F; ++k) feats(i, k) = static_cast<T>(f[k]);
    }
    auto r = crossmodal_from_embeddings(embed_texts(model, seqs), embed_images(model, feats));
    const double vals[] = {r.text_to_image.r1, r.text_to_image.r5, r.text_to_image.r10,
                           r.image_to_text.r1, r.image_to_text.r5, r.image_to_text.r10};
    for (std::size_t k = 0; k < 6; ++k) {
      rep.metrics[names[k]] += vals[k];
      rep.meta["per_language"][languages[l]][names[k]] = vals[k];
    }
    rep.meta["pairs"][languages[l]] = caps.size();
    ++counted;
  }
  if (counted)
    for (const char* n : names) rep.metrics[n] /= static_cast<double>(counted);
  rep.meta["seed"] = seed;
  return rep;
}

}  // namespace pivot
