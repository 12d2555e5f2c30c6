#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pivot/errors.hpp"
#include "pivot/tokenizer/bpe.hpp"

namespace pivot {

/// One caption in one language, linked to one image.
struct CaptionRecord {
  std::string id;
  std::string lang;
  std::string text;
  std::string image_id;
  std::vector<TokenId> tokens;  // filled by tokenize()
};

/// Precomputed visual features standing in for a raw image.
struct ImageRecord {
  std::string id;
  std::vector<float> features;
};

/// Caption and image tables with id lookups.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<CaptionRecord> captions, std::vector<ImageRecord> images)
      : captions_(std::move(captions)), images_(std::move(images)) {
    reindex();
  }

  const std::vector<CaptionRecord>& captions() const noexcept { return captions_; }
  std::vector<CaptionRecord>& captions() noexcept { return captions_; }
  const std::vector<ImageRecord>& images() const noexcept { return images_; }

  const CaptionRecord& caption(const std::string& id) const { return captions_.at(caption_index(id)); }
  const ImageRecord& image(const std::string& id) const { return images_.at(image_index(id)); }

  std::size_t caption_index(const std::string& id) const {
    auto it = caption_pos_.find(id);
    if (it == caption_pos_.end()) throw DataError("unknown caption id '" + id + "'");
    return it->second;
  }
  std::size_t image_index(const std::string& id) const {
    auto it = image_pos_.find(id);
    if (it == image_pos_.end()) throw DataError("unknown image id '" + id + "'");
    return it->second;
  }
  bool has_image(const std::string& id) const { return image_pos_.count(id) != 0; }

  std::size_t feature_dim() const { return images_.empty() ? 0 : images_.front().features.size(); }

  /// Sorted distinct language codes.
  std::vector<std::string> languages() const {
    std::set<std::string> s;
    for (const auto& c : captions_) s.insert(c.lang);
    return {s.begin(), s.end()};
  }

  void tokenize(const Vocabulary& vocab) {
    for (auto& c : captions_) c.tokens = vocab.encode(c.text);
  }

  /// Every caption must reference an existing image. Lists all offenders.
  void check_references() const {
    std::vector<std::string> bad;
    for (const auto& c : captions_)
      if (!has_image(c.image_id)) bad.push_back(c.id + "->" + c.image_id);
    if (!bad.empty()) {
      std::string msg = "captions reference missing images:";
      for (const auto& b : bad) msg += " " + b;
      throw DataError(msg);
    }
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    auto same_caps = std::equal(a.captions_.begin(), a.captions_.end(), b.captions_.begin(), b.captions_.end(),
                                [](const auto& x, const auto& y) {
                                  return x.id == y.id && x.lang == y.lang && x.text == y.text &&
                                         x.image_id == y.image_id;
                                });
    auto same_imgs = std::equal(a.images_.begin(), a.images_.end(), b.images_.begin(), b.images_.end(),
                                [](const auto& x, const auto& y) { return x.id == y.id && x.features == y.features; });
    return same_caps && same_imgs;
  }

 private:
  void reindex() {
    caption_pos_.clear();
    image_pos_.clear();
    for (std::size_t i = 0; i < captions_.size(); ++i) {
      if (!caption_pos_.emplace(captions_[i].id, i).second) throw DataError("duplicate caption id '" + captions_[i].id + "'");
    }
    for (std::size_t i = 0; i < images_.size(); ++i) {
      if (!image_pos_.emplace(images_[i].id, i).second) throw DataError("duplicate image id '" + images_[i].id + "'");
    }
  }

  std::vector<CaptionRecord> captions_;
  std::vector<ImageRecord> images_;
  std::unordered_map<std::string, std::size_t> caption_pos_;
  std::unordered_map<std::string, std::size_t> image_pos_;
};

/// The same content rendered in several languages: caption id per language code.
struct ParaphraseGroup {
  std::string image_id;
  std::map<std::string, std::string> captions;  // lang -> caption id
};

/// Disjoint train / val / test partition. `adapt` holds captions in languages
/// held out from training. Val and test carry paraphrase groups.
struct SplitManifest {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::vector<std::string> adapt;
  std::vector<ParaphraseGroup> val_groups;
  std::vector<ParaphraseGroup> test_groups;
};

inline nlohmann::json to_json(const std::vector<ParaphraseGroup>& groups) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& g : groups) out.push_back({{"image_id", g.image_id}, {"captions", g.captions}});
  return out;
}

inline std::vector<ParaphraseGroup> groups_from_json(const nlohmann::json& j) {
  std::vector<ParaphraseGroup> out;
  for (const auto& e : j) {
    out.push_back({e.at("image_id").get<std::string>(), e.at("captions").get<std::map<std::string, std::string>>()});
  }
  return out;
}

inline nlohmann::json to_json(const SplitManifest& m) {
  return {{"train", m.train},   {"val", m.val},
          {"test", m.test},     {"adapt", m.adapt},
          {"val_groups", to_json(m.val_groups)}, {"test_groups", to_json(m.test_groups)}};
}

inline SplitManifest manifest_from_json(const nlohmann::json& j) {
  try {
    SplitManifest m;
    m.train = j.at("train").get<std::vector<std::string>>();
    m.val = j.at("val").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    m.adapt = j.value("adapt", std::vector<std::string>{});
    m.val_groups = groups_from_json(j.at("val_groups"));
    m.test_groups = groups_from_json(j.at("test_groups"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("split manifest: ") + e.what());
  }
}

/// Fractions of groups assigned to train / val / test.
struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

/// Group counts for the requested ratios: val and test are rounded, train takes the rest.
inline std::array<std::size_t, 3> split_counts(std::size_t groups, const SplitRatios& r) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || r.train + r.val + r.test > 1.0 + 1e-9) {
    throw UsageError("split ratios must be non-negative and sum to at most 1");
  }
  const auto val = static_cast<std::size_t>(std::llround(static_cast<double>(groups) * r.val));
  const auto test = static_cast<std::size_t>(std::llround(static_cast<double>(groups) * r.test));
  const double used = r.train + r.val + r.test;
  std::size_t train = static_cast<std::size_t>(std::llround(static_cast<double>(groups) * r.train));
  if (used > 1.0 - 1e-9) train = groups >= val + test ? groups - val - test : 0;
  if (val + test + train > groups || (r.train > 0 && train == 0) || (r.val > 0 && val == 0) ||
      (r.test > 0 && test == 0)) {
    throw DataError("not enough groups (" + std::to_string(groups) + ") for the requested split ratios");
  }
  return {train, val, test};
}

/// Partition a set of caption groups (all captions sharing an image) into
/// train / val / test by image. Test and val groups must cover every language
/// in `languages`; groups that do not are only eligible for train.
inline SplitManifest make_splits(const Dataset& data, const SplitRatios& ratios, std::uint64_t seed,
                                 const std::vector<std::string>& languages) {
  std::map<std::string, std::map<std::string, std::vector<std::string>>> by_image;  // image -> lang -> captions
  for (const auto& c : data.captions()) by_image[c.image_id][c.lang].push_back(c.id);

  std::vector<std::string> complete, partial;
  for (const auto& [img, langs] : by_image) {
    bool full = true;
    for (const auto& l : languages) {
      auto it = langs.find(l);
      full = full && it != langs.end() && it->second.size() == 1;
    }
    (full ? complete : partial).push_back(img);
  }
  const auto counts = split_counts(by_image.size(), ratios);
  if (counts[1] + counts[2] > complete.size()) {
    throw DataError("make_splits: only " + std::to_string(complete.size()) +
                    " groups cover every language; need " + std::to_string(counts[1] + counts[2]));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(complete.begin(), complete.end(), rng);

  SplitManifest m;
  auto take_group = [&](const std::string& img, std::vector<std::string>& ids, std::vector<ParaphraseGroup>* groups) {
    ParaphraseGroup g{img, {}};
    for (const auto& [lang, caps] : by_image.at(img)) {
      ids.insert(ids.end(), caps.begin(), caps.end());
      if (groups) g.captions[lang] = caps.front();
    }
    if (groups) groups->push_back(std::move(g));
  };
  std::size_t pos = 0;
  for (std::size_t i = 0; i < counts[2]; ++i) take_group(complete[pos++], m.test, &m.test_groups);
  for (std::size_t i = 0; i < counts[1]; ++i) take_group(complete[pos++], m.val, &m.val_groups);
  std::vector<std::string> rest(complete.begin() + static_cast<std::ptrdiff_t>(pos), complete.end());
  rest.insert(rest.end(), partial.begin(), partial.end());
  std::sort(rest.begin(), rest.end());
  std::shuffle(rest.begin(), rest.end(), rng);
  rest.resize(std::min(rest.size(), counts[0]));
  for (const auto& img : rest) take_group(img, m.train, nullptr);
  return m;
}

/// Hidden facts about a synthetic world. Only evaluation code loads this.
struct GroundTruth {
  std::vector<std::string> languages;
  /// word_map[lang][concept] = surface wordform.
  std::map<std::string, std::vector<std::string>> word_map;
  std::map<std::string, std::vector<std::string>> function_words;
  std::map<std::string, std::vector<int>> image_concepts;
  /// Concepts a caption actually describes (differs from its image when corrupted).
  std::map<std::string, std::vector<int>> caption_concepts;
  std::set<std::string> corrupted;
};

/// A caption translated into another language, paired with its source caption.
/// Only the supervised baseline reads these.
struct ParallelCaption {
  std::string source_id;
  CaptionRecord caption;
};

inline nlohmann::json to_json(const GroundTruth& gt) {
  return {{"languages", gt.languages},
          {"word_map", gt.word_map},
          {"function_words", gt.function_words},
          {"image_concepts", gt.image_concepts},
          {"caption_concepts", gt.caption_concepts},
          {"corrupted", gt.corrupted}};
}

inline GroundTruth ground_truth_from_json(const nlohmann::json& j) {
  try {
    GroundTruth gt;
    gt.languages = j.at("languages").get<std::vector<std::string>>();
    gt.word_map = j.at("word_map").get<std::map<std::string, std::vector<std::string>>>();
    gt.function_words = j.at("function_words").get<std::map<std::string, std::vector<std::string>>>();
    gt.image_concepts = j.at("image_concepts").get<std::map<std::string, std::vector<int>>>();
    gt.caption_concepts = j.at("caption_concepts").get<std::map<std::string, std::vector<int>>>();
    gt.corrupted = j.at("corrupted").get<std::set<std::string>>();
    return gt;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("ground truth: ") + e.what());
  }
}

}  // namespace pivot
