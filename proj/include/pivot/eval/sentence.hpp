#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivot/corpus/records.hpp"
#include "pivot/diffcore/tensor.hpp"
#include "pivot/errors.hpp"
#include "pivot/eval/report.hpp"
#include "pivot/model/model.hpp"

namespace pivot {

/// Tokenised paraphrase groups: row r is group `group[r]` in language `lang[r]`.
struct ParaphraseSet {
  std::vector<std::string> languages;
  std::vector<std::string> group_ids;  // image id per group
  std::vector<std::vector<TokenId>> tokens;
  std::vector<std::size_t> group;
  std::vector<std::size_t> lang;

  std::size_t groups() const noexcept { return group_ids.size(); }
  std::size_t rows() const noexcept { return tokens.size(); }
};

/// Collect tokenised groups restricted to `languages`; every group must cover all of them.
inline ParaphraseSet make_paraphrase_set(const Dataset& data, const std::vector<ParaphraseGroup>& groups,
                                         const std::vector<std::string>& languages) {
  ParaphraseSet s;
  s.languages = languages;
  for (const auto& g : groups) {
    const std::size_t gi = s.group_ids.size();
    s.group_ids.push_back(g.image_id);
    for (std::size_t l = 0; l < languages.size(); ++l) {
      auto it = g.captions.find(languages[l]);
      if (it == g.captions.end()) {
        throw DataError("paraphrase group '" + g.image_id + "' has no caption in language '" + languages[l] + "'");
      }
      const auto& cap = data.caption(it->second);
      if (cap.tokens.empty()) throw DataError("caption '" + cap.id + "' is not tokenised");
      s.tokens.push_back(cap.tokens);
      s.group.push_back(gi);
      s.lang.push_back(l);
    }
  }
  return s;
}

/// Keep `n` groups chosen uniformly at random (all groups when n >= groups()).
inline ParaphraseSet sample_groups(const ParaphraseSet& s, std::size_t n, std::uint64_t seed) {
  if (n >= s.groups()) return s;
  std::vector<std::size_t> order(s.groups());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(n);
  std::sort(order.begin(), order.end());
  std::vector<std::size_t> remap(s.groups(), SIZE_MAX);
  ParaphraseSet out;
  out.languages = s.languages;
  for (std::size_t k = 0; k < n; ++k) {
    remap[order[k]] = k;
    out.group_ids.push_back(s.group_ids[order[k]]);
  }
  for (std::size_t r = 0; r < s.rows(); ++r) {
    if (remap[s.group[r]] == SIZE_MAX) continue;
    out.tokens.push_back(s.tokens[r]);
    out.group.push_back(remap[s.group[r]]);
    out.lang.push_back(s.lang[r]);
  }
  return out;
}

struct SentenceRetrievalResult {
  double accuracy = 0;        // mean over queries of positives found in the top M-1
  std::vector<std::vector<double>> pair;  // pair[q][t]: fraction of language-q queries whose language-t paraphrase is in the top M-1
  std::size_t queries = 0;
  std::size_t languages = 0;
  double chance = 0;          // (M-1) / (n*M - 1)
};

/// Rank every other sentence for every query by score; ties go to the lower row index.
/// `scores(q, c)` must be defined for all rows.
inline SentenceRetrievalResult sentence_retrieval_from_scores(const Tensor<double>& scores,
                                                              const std::vector<std::size_t>& group,
                                                              const std::vector<std::size_t>& lang,
                                                              std::size_t languages) {
  const std::size_t n = group.size();
  if (scores.shape() != Shape{n, n} || lang.size() != n) throw std::invalid_argument("sentence retrieval: shape mismatch");
  if (languages < 2) throw DataError("sentence retrieval: need at least two languages");
  std::map<std::size_t, std::size_t> group_size;
  for (auto g : group) ++group_size[g];
  for (const auto& [g, c] : group_size)
    if (c != languages) throw DataError("sentence retrieval: group " + std::to_string(g) + " is incomplete");
  const std::size_t k = languages - 1;
  SentenceRetrievalResult res;
  res.languages = languages;
  res.queries = n;
  res.chance = static_cast<double>(k) / static_cast<double>(n - 1);
  res.pair.assign(languages, std::vector<double>(languages, 0.0));
  std::vector<std::vector<std::size_t>> pair_count(languages, std::vector<std::size_t>(languages, 0));
  std::vector<std::size_t> cand;
  double total = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double* s = &scores.data()[q * n];
    auto better = [&](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); };
    cand.clear();
    for (std::size_t c = 0; c < n; ++c)
      if (c != q) cand.push_back(c);
    std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k - 1), cand.end(), better);
    const std::size_t kth = cand[k - 1];  // worst candidate still inside the top k
    std::size_t hits = 0;
    for (std::size_t c = 0; c < n; ++c) {
      if (c == q || group[c] != group[q]) continue;
      const bool in_top = c == kth || better(c, kth);
      hits += in_top;
      res.pair[lang[q]][lang[c]] += in_top;
      ++pair_count[lang[q]][lang[c]];
    }
    total += static_cast<double>(hits) / static_cast<double>(k);
  }
  res.accuracy = total / static_cast<double>(n);
  for (std::size_t a = 0; a < languages; ++a)
    for (std::size_t b = 0; b < languages; ++b)
      if (pair_count[a][b]) res.pair[a][b] /= static_cast<double>(pair_count[a][b]);
  return res;
}

/// Sentence retrieval on unit-row embeddings (n*M x D) using the scaled cosine.
template <class T>
SentenceRetrievalResult sentence_retrieval_from_embeddings(const Tensor<T>& emb, const std::vector<std::size_t>& group,
                                                           const std::vector<std::size_t>& lang,
                                                           std::size_t languages) {
  auto sim = similarity_matrix(emb, emb);
  Tensor<double> s = sim.template cast<double>();
  return sentence_retrieval_from_scores(s, group, lang, languages);
}

/// Text-only evaluation: embeds the sentences with the text encoder; images are never touched.
template <class T>
SentenceRetrievalResult sentence_retrieval_eval(Model<T>& model, const ParaphraseSet& set) {
  auto emb = embed_texts(model, set.tokens);
  return sentence_retrieval_from_embeddings(emb, set.group, set.lang, set.languages.size());
}

inline nlohmann::json to_json(const SentenceRetrievalResult& r) {
  return {{"accuracy", r.accuracy}, {"chance", r.chance},       {"queries", r.queries},
          {"languages", r.languages}, {"pair_matrix", r.pair}};
}

inline RetrievalReport to_report(const SentenceRetrievalResult& r, const std::vector<std::string>& languages) {
  RetrievalReport rep;
  rep.protocol = "sentence-retrieval";
  rep.metrics = {{"accuracy", r.accuracy}, {"chance", r.chance}, {"queries", static_cast<double>(r.queries)}};
  rep.languages = languages;
  rep.matrix = r.pair;
  rep.asymmetry = asymmetry_matrix(r.pair);
  return rep;
}

}  // namespace pivot
