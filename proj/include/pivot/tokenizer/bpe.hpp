#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pivot/errors.hpp"
#include "pivot/tokenizer/utf8.hpp"

namespace pivot {

using TokenId = std::uint32_t;

namespace special {
inline constexpr TokenId seq = 0;
inline constexpr TokenId mask = 1;
inline constexpr TokenId pad = 2;
inline constexpr TokenId unk = 3;
inline constexpr std::size_t count = 4;
inline const std::array<std::string, count> names = {"[SEQ]", "[MASK]", "[PAD]", "[UNK]"};
}  // namespace special

/// End-of-word marker appended to every pre-split word. Merges never cross it,
/// so tokens never span two words. Text containing the literal marker is not
/// supported.
inline const std::string kEndOfWord = "</w>";

/// Shared byte-pair-encoding vocabulary.
///
/// Ids: 0-3 are the special tokens, then the base alphabet (codepoints in
/// codepoint order, preceded by the end-of-word marker), then one id per merge
/// whose result is a new string. Immutable once built.
class Vocabulary {
 public:
  using Merge = std::pair<std::string, std::string>;

  Vocabulary() : Vocabulary(std::vector<std::string>{}, std::vector<Merge>{}) {}

  Vocabulary(std::vector<std::string> alphabet, std::vector<Merge> merges)
      : alphabet_(std::move(alphabet)), merges_(std::move(merges)) {
    for (const auto& s : special::names) add_token(s);
    add_token(kEndOfWord);
    for (const auto& a : alphabet_) {
      if (utf8::decode(a).size() != 1) throw DataError("vocabulary: alphabet entry '" + a + "' is not one codepoint");
      add_token(a);
      base_.insert(a);
    }
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [l, rr] = merges_[r];
      if (!ids_.count(l) || !ids_.count(rr)) {
        throw DataError("vocabulary: merge " + std::to_string(r) + " uses unknown token");
      }
      rank_.emplace(pair_key(l, rr), r);
      add_token(l + rr);
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& alphabet() const noexcept { return alphabet_; }
  const std::vector<Merge>& merges() const noexcept { return merges_; }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw DataError("vocabulary: token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  std::optional<TokenId> id_of(const std::string& tok) const {
    auto it = ids_.find(tok);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  static bool is_special(TokenId id) noexcept { return id < special::count; }

  /// Token surface without the end-of-word marker.
  std::string surface(TokenId id) const {
    std::string s = token(id);
    if (s.size() >= kEndOfWord.size() && s.compare(s.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
      s.resize(s.size() - kEndOfWord.size());
    }
    return s;
  }

  /// Encode one pre-split word (no [SEQ]).
  std::vector<TokenId> encode_word(const std::vector<char32_t>& word) const {
    std::vector<std::string> syms;
    syms.reserve(word.size() + 1);
    for (char32_t c : word) {
      std::string s = utf8::encode(c);
      syms.push_back(base_.count(s) ? std::move(s) : special::names[special::unk]);
    }
    syms.push_back(kEndOfWord);
    while (syms.size() > 1) {
      std::size_t best_rank = merges_.size();
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = rank_.find(pair_key(syms[i], syms[i + 1]));
        if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == merges_.size()) break;
      const auto& [l, r] = merges_[best_rank];
      std::vector<std::string> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
          next.push_back(l + r);
          i += 2;
        } else {
          next.push_back(std::move(syms[i]));
          ++i;
        }
      }
      syms = std::move(next);
    }
    std::vector<TokenId> ids;
    ids.reserve(syms.size());
    for (const auto& s : syms) ids.push_back(ids_.at(s));
    return ids;
  }

  /// [SEQ] followed by the tokens of every whitespace-separated word.
  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids{special::seq};
    for (const auto& w : utf8::split_words(text)) {
      auto wi = encode_word(w);
      ids.insert(ids.end(), wi.begin(), wi.end());
    }
    return ids;
  }

  /// Inverse of encode for text whose words are separated by single spaces.
  /// [SEQ] and [PAD] are dropped; [MASK] and [UNK] render literally.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id == special::seq || id == special::pad) continue;
      const std::string& t = token(id);
      if (is_special(id)) {
        out += t;
        continue;
      }
      if (t.size() >= kEndOfWord.size() && t.compare(t.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
        out.append(t, 0, t.size() - kEndOfWord.size());
        out += ' ';
      } else {
        out += t;
      }
    }
    if (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [l, r] : merges_) merges.push_back({l, r});
    return {{"version", 1},
            {"specials", special::names},
            {"end_of_word", kEndOfWord},
            {"alphabet", alphabet_},
            {"merges", merges},
            {"size", size()}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != 1) throw DataError("vocabulary: unsupported version");
      const auto specials = j.at("specials").get<std::vector<std::string>>();
      if (!std::equal(specials.begin(), specials.end(), special::names.begin(), special::names.end())) {
        throw DataError("vocabulary: unexpected special tokens");
      }
      std::vector<Merge> merges;
      for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
      Vocabulary v(j.at("alphabet").get<std::vector<std::string>>(), std::move(merges));
      if (v.size() != j.at("size").get<std::size_t>()) throw DataError("vocabulary: size field does not match merges");
      return v;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("vocabulary: malformed file: ") + e.what());
    }
  }

 private:
  static std::string pair_key(const std::string& l, const std::string& r) {
    std::string k;
    k.reserve(l.size() + r.size() + 1);
    k += l;
    k += '\0';
    k += r;
    return k;
  }

  void add_token(const std::string& s) {
    if (ids_.emplace(s, static_cast<TokenId>(tokens_.size())).second) tokens_.push_back(s);
  }

  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::unordered_map<std::string, std::size_t> rank_;
  std::set<std::string> base_;
};

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair until
/// the vocabulary reaches `target_size` or no pair occurs at least twice.
/// Equal counts are broken by the merged string, then by the left symbol.
inline Vocabulary train_bpe(const std::vector<std::string>& corpus, std::size_t target_size) {
  if (corpus.empty()) throw DataError("train_bpe: empty corpus");

  std::map<std::vector<char32_t>, std::size_t> word_freq;
  std::set<char32_t> letters;
  for (const auto& line : corpus) {
    for (auto& w : utf8::split_words(line)) {
      letters.insert(w.begin(), w.end());
      ++word_freq[std::move(w)];
    }
  }
  std::vector<std::string> alphabet;
  for (char32_t c : letters) alphabet.push_back(utf8::encode(c));
  const std::size_t base_size = special::count + 1 + alphabet.size();
  if (target_size < base_size) {
    throw std::invalid_argument("train_bpe: target size " + std::to_string(target_size) +
                                " is below the base vocabulary size " + std::to_string(base_size));
  }

  // Working symbol table: symbol id -> string.
  std::vector<std::string> sym_str;
  std::unordered_map<std::string, std::uint32_t> sym_id;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = sym_id.emplace(s, static_cast<std::uint32_t>(sym_str.size()));
    if (inserted) sym_str.push_back(s);
    return it->second;
  };
  const std::uint32_t eow = intern(kEndOfWord);
  for (const auto& a : alphabet) intern(a);

  struct Word {
    std::vector<std::uint32_t> syms;
    std::size_t freq;
  };
  std::vector<Word> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    Word wd{{}, f};
    for (char32_t c : w) wd.syms.push_back(sym_id.at(utf8::encode(c)));
    wd.syms.push_back(eow);
    words.push_back(std::move(wd));
  }

  std::vector<Vocabulary::Merge> merges;
  std::set<std::string> vocab_strings(special::names.begin(), special::names.end());
  vocab_strings.insert(sym_str.begin(), sym_str.end());

  while (vocab_strings.size() < target_size) {
    std::unordered_map<std::uint64_t, std::size_t> counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
        counts[(static_cast<std::uint64_t>(w.syms[i]) << 32) | w.syms[i + 1]] += w.freq;
      }
    }
    std::uint64_t best = 0;
    std::size_t best_count = 0;
    std::string best_merged, best_left;
    for (const auto& [key, cnt] : counts) {
      if (cnt < best_count) continue;
      const auto& l = sym_str[key >> 32];
      const auto& r = sym_str[key & 0xFFFFFFFFu];
      std::string merged = l + r;
      if (cnt > best_count || merged < best_merged || (merged == best_merged && l < best_left)) {
        best = key;
        best_count = cnt;
        best_merged = std::move(merged);
        best_left = l;
      }
    }
    if (best_count < 2) break;
    const std::uint32_t a = static_cast<std::uint32_t>(best >> 32);
    const std::uint32_t b = static_cast<std::uint32_t>(best & 0xFFFFFFFFu);
    merges.emplace_back(sym_str[a], sym_str[b]);
    const std::uint32_t ab = intern(best_merged);
    vocab_strings.insert(best_merged);
    for (auto& w : words) {
      std::vector<std::uint32_t> next;
      next.reserve(w.syms.size());
      for (std::size_t i = 0; i < w.syms.size();) {
        if (i + 1 < w.syms.size() && w.syms[i] == a && w.syms[i + 1] == b) {
          next.push_back(ab);
          i += 2;
        } else {
          next.push_back(w.syms[i++]);
        }
      }
      w.syms = std::move(next);
    }
  }
  return Vocabulary(std::move(alphabet), std::move(merges));
}

/// Occurrence count of every token id over the encoded corpus ([SEQ] excluded).
inline std::vector<std::size_t> token_frequencies(const Vocabulary& vocab, const std::vector<std::string>& corpus) {
  std::vector<std::size_t> counts(vocab.size(), 0);
  for (const auto& line : corpus) {
    auto ids = vocab.encode(line);
    for (std::size_t i = 1; i < ids.size(); ++i) ++counts[ids[i]];
  }
  return counts;
}

}  // namespace pivot
