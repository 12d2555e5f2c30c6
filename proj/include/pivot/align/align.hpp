#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "pivot/corpus/records.hpp"
#include "pivot/diffcore/checkpoint.hpp"
#include "pivot/errors.hpp"
#include "pivot/log.hpp"
#include "pivot/model/model.hpp"
#include "pivot/tokenizer/bpe.hpp"
#include "pivot/tokenizer/utf8.hpp"

namespace pivot {

using Matrix = Eigen::MatrixXd;
using TokenPair = std::pair<TokenId, TokenId>;
using IndexPair = std::pair<std::size_t, std::size_t>;

/// True for tokens that can stand for a word: not special, and the surface has
/// a letter or digit (any non-ASCII codepoint counts as a letter).
inline bool is_wordlike(const Vocabulary& vocab, TokenId id) {
  if (Vocabulary::is_special(id) || id >= vocab.size()) return false;
  for (char32_t c : utf8::decode(vocab.surface(id))) {
    if (c >= 0x80) return true;
    if ((c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) return true;
  }
  return false;
}

struct LanguageTokenSet {
  std::string lang;
  std::map<TokenId, std::size_t> counts;

  std::vector<TokenId> ids() const {
    std::vector<TokenId> out;
    out.reserve(counts.size());
    for (const auto& [id, c] : counts) out.push_back(id);
    return out;
  }
  bool contains(TokenId id) const { return counts.count(id) > 0; }
};

/// Word-like tokens seen at least `min_count` times per language, ordered by language code.
inline std::vector<LanguageTokenSet> language_token_sets(const std::vector<CaptionRecord>& captions,
                                                         const Vocabulary& vocab, std::size_t min_count = 3) {
  std::map<std::string, std::map<TokenId, std::size_t>> raw;
  for (const auto& c : captions) {
    auto& m = raw[c.lang];
    for (TokenId t : c.tokens)
      if (is_wordlike(vocab, t)) ++m[t];
  }
  std::vector<LanguageTokenSet> out;
  for (auto& [lang, m] : raw) {
    LanguageTokenSet s{lang, {}};
    for (const auto& [t, n] : m)
      if (n >= min_count) s.counts.emplace(t, n);
    out.push_back(std::move(s));
  }
  return out;
}

struct WordTranslationGT {
  std::string lang_a, lang_b;
  std::vector<TokenPair> pairs;  // (token in A, token in B), sorted
};

using AlignedSentences = std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>>;

/// Sentence pairs (A caption, B caption) from complete paraphrase groups.
inline AlignedSentences aligned_sentences(const Dataset& data, const std::vector<ParaphraseGroup>& groups,
                                          const std::string& lang_a, const std::string& lang_b) {
  AlignedSentences out;
  for (const auto& g : groups) {
    auto a = g.captions.find(lang_a), b = g.captions.find(lang_b);
    if (a == g.captions.end() || b == g.captions.end()) continue;
    out.emplace_back(data.caption(a->second).tokens, data.caption(b->second).tokens);
  }
  return out;
}

namespace detail {

/// tf-idf scores of `to` tokens for each `from` token, where the document of a
/// `from` token pools (with repetition) the `to` tokens of every sentence it appears in.
inline std::map<TokenId, std::vector<std::pair<TokenId, double>>> tfidf_scores(
    const std::vector<std::vector<TokenId>>& from, const std::vector<std::vector<TokenId>>& to,
    const Vocabulary& vocab) {
  std::map<TokenId, std::map<TokenId, double>> docs;
  for (std::size_t s = 0; s < from.size(); ++s) {
    std::set<TokenId> present;
    for (TokenId t : from[s])
      if (is_wordlike(vocab, t)) present.insert(t);
    for (TokenId t : present) {
      auto& d = docs[t];
      for (TokenId u : to[s])
        if (is_wordlike(vocab, u)) d[u] += 1.0;
    }
  }
  std::map<TokenId, double> df;
  for (const auto& [t, d] : docs)
    for (const auto& [u, f] : d) df[u] += 1.0;
  const double n_docs = static_cast<double>(docs.size());
  std::map<TokenId, std::vector<std::pair<TokenId, double>>> out;
  for (const auto& [t, d] : docs) {
    double total = 0;
    for (const auto& [u, f] : d) total += f;
    auto& row = out[t];
    for (const auto& [u, f] : d) row.emplace_back(u, (f / total) * std::log(n_docs / df[u]));
  }
  return out;
}

/// Top-k candidates by score, ties to the lower token id.
inline std::set<TokenId> top_k(std::vector<std::pair<TokenId, double>> row, std::size_t k) {
  std::sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
    return a.second > b.second || (a.second == b.second && a.first < b.first);
  });
  std::set<TokenId> out;
  for (std::size_t i = 0; i < std::min(k, row.size()); ++i) out.insert(row[i].first);
  return out;
}

}  // namespace detail

/// Mutual top-k tf-idf translation pairs between two sentence-aligned languages.
inline WordTranslationGT mine_word_gt(const AlignedSentences& aligned, const Vocabulary& vocab,
                                      const std::string& lang_a, const std::string& lang_b, std::size_t k = 5) {
  if (aligned.empty()) throw DataError("mine_word_gt: no aligned sentences for " + lang_a + "-" + lang_b);
  if (k < 1) throw UsageError("mine_word_gt: k must be >= 1");
  std::vector<std::vector<TokenId>> a, b;
  for (const auto& [x, y] : aligned) {
    a.push_back(x);
    b.push_back(y);
  }
  const auto ab = detail::tfidf_scores(a, b, vocab);
  const auto ba = detail::tfidf_scores(b, a, vocab);
  std::map<TokenId, std::set<TokenId>> top_ba;
  for (const auto& [t, row] : ba) top_ba[t] = detail::top_k(row, k);
  WordTranslationGT gt{lang_a, lang_b, {}};
  for (const auto& [i, row] : ab) {
    for (TokenId j : detail::top_k(row, k)) {
      auto it = top_ba.find(j);
      if (it != top_ba.end() && it->second.count(i)) gt.pairs.emplace_back(i, j);
    }
  }
  std::sort(gt.pairs.begin(), gt.pairs.end());
  return gt;
}

inline nlohmann::json to_json(const std::vector<WordTranslationGT>& gts, const Vocabulary& vocab) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& g : gts) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [a, b] : g.pairs) pairs.push_back({vocab.token(a), vocab.token(b)});
    arr.push_back({{"lang_a", g.lang_a}, {"lang_b", g.lang_b}, {"pairs", pairs}});
  }
  return arr;
}

inline std::vector<WordTranslationGT> word_gt_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
  std::vector<WordTranslationGT> out;
  auto id = [&](const std::string& tok) {
    auto v = vocab.id_of(tok);
    if (!v) throw DataError("word GT: token '" + tok + "' is not in the vocabulary");
    return *v;
  };
  try {
    for (const auto& e : j) {
      WordTranslationGT g{e.at("lang_a").get<std::string>(), e.at("lang_b").get<std::string>(), {}};
      for (const auto& p : e.at("pairs")) g.pairs.emplace_back(id(p.at(0).get<std::string>()), id(p.at(1).get<std::string>()));
      out.push_back(std::move(g));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("word GT: ") + e.what());
  }
  return out;
}

namespace detail {

inline Matrix normalized_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0) out.row(i) /= n;
  }
  return out;
}

/// Indices of the k largest entries, ties to the lower index.
inline std::vector<std::size_t> top_indices(const Eigen::VectorXd& v, std::size_t k) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(v.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto ea = static_cast<Eigen::Index>(a), eb = static_cast<Eigen::Index>(b);
    return v(ea) > v(eb) || (v(ea) == v(eb) && a < b);
  });
  idx.resize(k);
  return idx;
}

}  // namespace detail

/// Pairs (a, b) where b is among a's k nearest rows of B and a among b's k nearest rows of A (cosine).
inline std::vector<IndexPair> mutual_knn_anchors(const Matrix& A, const Matrix& B, std::size_t k = 5) {
  if (k < 1) throw UsageError("mutual_knn_anchors: k must be >= 1");
  if (A.rows() == 0 || B.rows() == 0) throw DataError("mutual_knn_anchors: empty embedding set");
  if (A.cols() != B.cols()) throw DataError("mutual_knn_anchors: dimension mismatch");
  const Matrix S = detail::normalized_rows(A) * detail::normalized_rows(B).transpose();
  std::vector<std::set<std::size_t>> b_top(static_cast<std::size_t>(B.rows()));
  for (Eigen::Index b = 0; b < B.rows(); ++b)
    for (auto a : detail::top_indices(S.col(b), k)) b_top[static_cast<std::size_t>(b)].insert(a);
  std::vector<IndexPair> out;
  for (Eigen::Index a = 0; a < A.rows(); ++a) {
    auto near = detail::top_indices(S.row(a).transpose(), k);
    std::sort(near.begin(), near.end());
    for (auto b : near)
      if (b_top[b].count(static_cast<std::size_t>(a))) out.emplace_back(static_cast<std::size_t>(a), b);
  }
  return out;
}

struct ProcrustesSolution {
  Matrix W;
  std::size_t rank = 0;
};

/// Orthogonal W minimising ||XW - Y||_F, from the SVD of X^T Y.
inline ProcrustesSolution procrustes_solve(const Matrix& X, const Matrix& Y) {
  if (X.rows() != Y.rows() || X.cols() != Y.cols()) throw DataError("procrustes_solve: X and Y differ in shape");
  if (X.rows() < X.cols()) {
    logging::warn("procrustes_solve: " + std::to_string(X.rows()) + " anchors for dimension " +
                  std::to_string(X.cols()) + "; solution is not unique");
  }
  Eigen::JacobiSVD<Matrix> svd(X.transpose() * Y, Eigen::ComputeFullU | Eigen::ComputeFullV);
  ProcrustesSolution s;
  s.W = svd.matrixU() * svd.matrixV().transpose();
  const auto& sv = svd.singularValues();
  const double tol = sv.size() ? sv(0) * 1e-10 : 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) s.rank += sv(i) > tol;
  if (s.rank < static_cast<std::size_t>(X.cols())) {
    logging::warn("procrustes_solve: cross-covariance has rank " + std::to_string(s.rank) + " < " +
                  std::to_string(X.cols()));
  }
  return s;
}

struct ProcrustesMaps {
  std::vector<std::string> languages;
  std::vector<Matrix> W;                          // per language, D x D
  std::vector<std::vector<IndexPair>> anchors;    // (row in language, row in reference) from the last round
  std::vector<bool> included;
  std::vector<double> objective;                  // mean squared anchor residual after each round
  std::size_t rounds = 0;
};

namespace detail {

inline Matrix gather(const Matrix& m, const std::vector<IndexPair>& pairs, bool first) {
  Matrix out(static_cast<Eigen::Index>(pairs.size()), m.cols());
  for (std::size_t i = 0; i < pairs.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(first ? pairs[i].first : pairs[i].second));
  return out;
}

}  // namespace detail

/// Align several embedding sets to a shared mean space. The reference is indexed by the
/// rows of set 0. Each round re-discovers mutual k-NN anchors of every mapped set against the
/// reference, solves Procrustes per set, then averages each reference row with its best
/// anchored row from every other set.
inline ProcrustesMaps multi_procrustes(const std::vector<Matrix>& sets, std::size_t k = 5, std::size_t max_rounds = 10,
                                       double tol = 1e-4, std::vector<std::string> languages = {}) {
  if (sets.size() < 2) throw DataError("multi_procrustes: need at least two embedding sets");
  const auto dim = sets[0].cols();
  for (const auto& s : sets)
    if (s.cols() != dim || s.rows() == 0) throw DataError("multi_procrustes: sets must be non-empty and share a dimension");
  if (languages.empty())
    for (std::size_t l = 0; l < sets.size(); ++l) languages.push_back(std::to_string(l));
  const std::size_t L = sets.size();
  ProcrustesMaps maps;
  maps.languages = languages;
  maps.W.assign(L, Matrix::Identity(dim, dim));
  maps.anchors.assign(L, {});
  maps.included.assign(L, true);
  Matrix ref = sets[0];
  for (std::size_t round = 0; round < max_rounds; ++round) {
    double residual = 0;
    std::size_t n_anchor = 0;
    for (std::size_t l = 0; l < L; ++l) {
      auto anchors = mutual_knn_anchors(sets[l] * maps.W[l], ref, k);
      if (anchors.empty()) {
        if (maps.included[l]) logging::warn("multi_procrustes: language '" + languages[l] + "' has no anchors; excluded");
        maps.included[l] = false;
        maps.anchors[l].clear();
        continue;
      }
      maps.included[l] = true;
      const Matrix X = detail::gather(sets[l], anchors, true), Y = detail::gather(ref, anchors, false);
      maps.W[l] = procrustes_solve(X, Y).W;
      residual += (X * maps.W[l] - Y).squaredNorm();
      n_anchor += anchors.size();
      maps.anchors[l] = std::move(anchors);
    }
    maps.objective.push_back(n_anchor ? residual / static_cast<double>(n_anchor) : 0.0);
    maps.rounds = round + 1;

    Matrix sum = sets[0] * maps.W[0];
    Eigen::VectorXd count = Eigen::VectorXd::Ones(ref.rows());
    const Matrix ref_n = detail::normalized_rows(ref);
    for (std::size_t l = 1; l < L; ++l) {
      if (!maps.included[l]) continue;
      const Matrix mapped = sets[l] * maps.W[l];
      const Matrix mapped_n = detail::normalized_rows(mapped);
      std::map<std::size_t, std::pair<double, std::size_t>> best;  // ref row -> (cosine, row in l)
      for (const auto& [a, r] : maps.anchors[l]) {
        const double c = mapped_n.row(static_cast<Eigen::Index>(a)).dot(ref_n.row(static_cast<Eigen::Index>(r)));
        auto it = best.find(r);
        if (it == best.end() || c > it->second.first) best[r] = {c, a};
      }
      for (const auto& [r, ca] : best) {
        sum.row(static_cast<Eigen::Index>(r)) += mapped.row(static_cast<Eigen::Index>(ca.second));
        count(static_cast<Eigen::Index>(r)) += 1;
      }
    }
    Matrix next = sum.array().colwise() / count.array();
    const double moved = (next - ref).rowwise().norm().mean();
    ref = std::move(next);
    if (moved < tol) break;
  }
  return maps;
}

inline std::string maps_to_bytes(const ProcrustesMaps& maps) {
  std::vector<NamedTensor> ts;
  for (std::size_t l = 0; l < maps.W.size(); ++l) {
    const auto& W = maps.W[l];
    NamedTensor t{"W." + maps.languages[l], {static_cast<std::size_t>(W.rows()), static_cast<std::size_t>(W.cols())}, {}};
    for (Eigen::Index i = 0; i < W.rows(); ++i)
      for (Eigen::Index j = 0; j < W.cols(); ++j) t.values.push_back(W(i, j));
    ts.push_back(std::move(t));
  }
  nlohmann::json meta = {{"languages", maps.languages}, {"rounds", maps.rounds},
                         {"objective", maps.objective}, {"included", maps.included}};
  return encode_checkpoint(ts, "f64", meta);
}

inline ProcrustesMaps maps_from_bytes(const std::string& bytes) {
  auto ck = decode_checkpoint(bytes);
  ProcrustesMaps maps;
  try {
    maps.languages = ck.meta.at("languages").get<std::vector<std::string>>();
    maps.rounds = ck.meta.value("rounds", std::size_t{0});
    maps.objective = ck.meta.value("objective", std::vector<double>{});
    maps.included = ck.meta.value("included", std::vector<bool>(maps.languages.size(), true));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("maps: ") + e.what());
  }
  if (ck.tensors.size() != maps.languages.size()) throw DataError("maps: tensor count does not match languages");
  for (const auto& t : ck.tensors) {
    if (t.shape.size() != 2) throw DataError("maps: '" + t.name + "' is not a matrix");
    Matrix W(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
    for (Eigen::Index i = 0; i < W.rows(); ++i)
      for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = t.values[static_cast<std::size_t>(i * W.cols() + j)];
    maps.W.push_back(std::move(W));
  }
  maps.anchors.assign(maps.W.size(), {});
  return maps;
}

/// Per-language word embeddings: token-embedding rows restricted to each language's token set.
struct WordSpaces {
  std::vector<std::string> languages;
  std::vector<std::vector<TokenId>> tokens;
  std::vector<Matrix> embeddings;

  std::size_t index(const std::string& lang) const {
    auto it = std::find(languages.begin(), languages.end(), lang);
    if (it == languages.end()) throw DataError("unknown language '" + lang + "'");
    return static_cast<std::size_t>(it - languages.begin());
  }
  std::size_t row_of(std::size_t lang, TokenId tok) const {
    const auto& t = tokens[lang];
    auto it = std::lower_bound(t.begin(), t.end(), tok);
    if (it == t.end() || *it != tok) {
      throw DataError("token " + std::to_string(tok) + " is not in the word set of '" + languages[lang] + "'");
    }
    return static_cast<std::size_t>(it - t.begin());
  }
  bool has(std::size_t lang, TokenId tok) const {
    return std::binary_search(tokens[lang].begin(), tokens[lang].end(), tok);
  }
};

inline WordSpaces word_spaces(const Tensor<double>& token_embeddings, const std::vector<LanguageTokenSet>& sets) {
  WordSpaces ws;
  const std::size_t d = token_embeddings.cols();
  for (const auto& s : sets) {
    ws.languages.push_back(s.lang);
    ws.tokens.push_back(s.ids());
    Matrix m(static_cast<Eigen::Index>(s.counts.size()), static_cast<Eigen::Index>(d));
    Eigen::Index r = 0;
    for (const auto& [id, c] : s.counts) {
      if (id >= token_embeddings.rows()) throw DataError("word_spaces: token id beyond the embedding table");
      for (std::size_t j = 0; j < d; ++j) m(r, static_cast<Eigen::Index>(j)) = token_embeddings(id, j);
      ++r;
    }
    ws.embeddings.push_back(std::move(m));
  }
  return ws;
}

template <class T>
WordSpaces word_spaces(const Model<T>& model, const std::vector<LanguageTokenSet>& sets) {
  return word_spaces(model.params().get("tok_emb").template cast<double>(), sets);
}

/// Align the word spaces; map order follows ws.languages.
inline ProcrustesMaps align_word_spaces(const WordSpaces& ws, std::size_t k = 5, std::size_t max_rounds = 10,
                                        double tol = 1e-4) {
  return multi_procrustes(ws.embeddings, k, max_rounds, tol, ws.languages);
}

/// Target-language tokens ranked by cosine to `tok` after mapping both spaces (raw when maps is null).
inline std::vector<TokenId> translate_word(TokenId tok, std::size_t src, std::size_t tgt, const WordSpaces& ws,
                                           const ProcrustesMaps* maps = nullptr, std::size_t top = SIZE_MAX) {
  const std::size_t row = ws.row_of(src, tok);
  Eigen::RowVectorXd q = ws.embeddings[src].row(static_cast<Eigen::Index>(row));
  Matrix cand = ws.embeddings[tgt];
  if (maps) {
    q = q * maps->W.at(src);
    cand = cand * maps->W.at(tgt);
  }
  const double qn = q.norm();
  if (qn > 0) q /= qn;
  const Eigen::VectorXd scores = detail::normalized_rows(cand) * q.transpose();
  std::vector<TokenId> out;
  for (auto i : detail::top_indices(scores, std::min<std::size_t>(top, static_cast<std::size_t>(scores.size()))))
    out.push_back(ws.tokens[tgt][i]);
  return out;
}

}  // namespace pivot
