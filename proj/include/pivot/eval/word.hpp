#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "pivot/align/align.hpp"
#include "pivot/corpus/records.hpp"
#include "pivot/eval/report.hpp"
#include "pivot/log.hpp"
#include "pivot/tokenizer/bpe.hpp"
#include "pivot/tokenizer/utf8.hpp"

namespace pivot {

/// Token of a whole word when the tokenizer keeps it in one piece.
inline std::optional<TokenId> single_token(const Vocabulary& vocab, const std::string& word) {
  auto ids = vocab.encode_word(utf8::decode(word));
  if (ids.size() != 1) return std::nullopt;
  return ids.front();
}

/// Translation pairs straight from the generator's word map (concept wordforms that are single tokens).
inline WordTranslationGT word_map_gt(const GroundTruth& truth, const Vocabulary& vocab, const std::string& lang_a,
                                     const std::string& lang_b) {
  const auto& wa = truth.word_map.at(lang_a);
  const auto& wb = truth.word_map.at(lang_b);
  WordTranslationGT gt{lang_a, lang_b, {}};
  for (std::size_t c = 0; c < std::min(wa.size(), wb.size()); ++c) {
    auto a = single_token(vocab, wa[c]), b = single_token(vocab, wb[c]);
    if (a && b) gt.pairs.emplace_back(*a, *b);
  }
  std::sort(gt.pairs.begin(), gt.pairs.end());
  gt.pairs.erase(std::unique(gt.pairs.begin(), gt.pairs.end()), gt.pairs.end());
  return gt;
}

/// Fraction of mined pairs that translate one concept's wordform into the same concept's wordform.
inline double word_map_agreement(const WordTranslationGT& mined, const GroundTruth& truth, const Vocabulary& vocab) {
  if (mined.pairs.empty()) return 0.0;
  const auto ref = word_map_gt(truth, vocab, mined.lang_a, mined.lang_b);
  std::size_t hit = 0;
  for (const auto& p : mined.pairs) hit += std::binary_search(ref.pairs.begin(), ref.pairs.end(), p);
  return static_cast<double>(hit) / static_cast<double>(mined.pairs.size());
}

/// Fraction of mined pairs whose two tokens are both concept wordforms of their languages
/// (any concepts), as opposed to function words or word fragments.
inline double concept_pair_fraction(const WordTranslationGT& mined, const GroundTruth& truth, const Vocabulary& vocab) {
  if (mined.pairs.empty()) return 0.0;
  auto wordforms = [&](const std::string& lang) {
    std::set<TokenId> s;
    for (const auto& w : truth.word_map.at(lang))
      if (auto t = single_token(vocab, w)) s.insert(*t);
    return s;
  };
  const auto a = wordforms(mined.lang_a), b = wordforms(mined.lang_b);
  std::size_t hit = 0;
  for (const auto& [x, y] : mined.pairs) hit += a.count(x) && b.count(y);
  return static_cast<double>(hit) / static_cast<double>(mined.pairs.size());
}

/// Recall@K of ground-truth translations in both directions, averaged over pairs, then over language pairs.
inline RetrievalReport word_retrieval_eval(const WordSpaces& ws, const ProcrustesMaps* maps,
                                           const std::vector<WordTranslationGT>& gts, bool exclude_identical,
                                           std::size_t K = 10) {
  RetrievalReport rep;
  rep.protocol = maps ? "word-retrieval-procrustes" : "word-retrieval";
  rep.languages = ws.languages;
  const std::size_t L = ws.languages.size();
  rep.matrix.assign(L, std::vector<double>(L, 0.0));
  std::vector<std::vector<std::size_t>> counts(L, std::vector<std::size_t>(L, 0));
  double total = 0;
  std::size_t lang_pairs = 0, used = 0, skipped = 0;
  for (const auto& gt : gts) {
    const std::size_t a = ws.index(gt.lang_a), b = ws.index(gt.lang_b);
    double hits = 0;
    std::size_t n = 0;
    for (const auto& [ta, tb] : gt.pairs) {
      if (exclude_identical && ta == tb) continue;
      if (!ws.has(a, ta) || !ws.has(b, tb)) {
        ++skipped;
        continue;
      }
      const auto fwd = translate_word(ta, a, b, ws, maps, K);
      const auto bwd = translate_word(tb, b, a, ws, maps, K);
      const bool hf = std::find(fwd.begin(), fwd.end(), tb) != fwd.end();
      const bool hb = std::find(bwd.begin(), bwd.end(), ta) != bwd.end();
      rep.matrix[a][b] += hf;
      rep.matrix[b][a] += hb;
      ++counts[a][b];
      ++counts[b][a];
      hits += hf + hb;
      n += 2;
    }
    if (n == 0) {
      logging::warn("word retrieval: no usable pairs for " + gt.lang_a + "-" + gt.lang_b + "; skipped");
      continue;
    }
    total += hits / static_cast<double>(n);
    ++lang_pairs;
    used += n / 2;
  }
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j)
      if (counts[i][j]) rep.matrix[i][j] /= static_cast<double>(counts[i][j]);
  rep.metrics["recall_at_" + std::to_string(K)] = lang_pairs ? total / static_cast<double>(lang_pairs) : 0.0;
  rep.metrics["pairs"] = static_cast<double>(used);
  rep.metrics["language_pairs"] = static_cast<double>(lang_pairs);
  rep.metrics["skipped_out_of_set"] = static_cast<double>(skipped);
  rep.meta["exclude_identical"] = exclude_identical;
  return rep;
}

}  // namespace pivot
