#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivot/corpus/records.hpp"
#include "pivot/errors.hpp"
#include "pivot/tokenizer/utf8.hpp"

namespace pivot {

/// Parameters of a synthetic multilingual image-caption world.
struct WorldSpec {
  std::size_t concepts = 50;        // C
  std::size_t languages = 6;        // L
  std::size_t feature_dim = 32;     // F
  std::size_t pairs = 5000;         // N scenes
  std::size_t scene_min = 1;
  std::size_t scene_max = 3;
  double p_cognate = 0.1;
  double p_noise = 0.1;
  double noise_sigma = 0.3;
  std::uint64_t seed = 0;
  std::size_t function_words = 5;   // per language
  double mean_words = 10.0;         // mean caption length in words
  std::size_t held_out_languages = 0;
  SplitRatios ratios{};

  void validate() const {
    if (concepts < 1 || languages < 1 || feature_dim < 1 || pairs < 1) {
      throw UsageError("world: concepts, languages, feature_dim and pairs must be at least 1");
    }
    if (scene_min < 1 || scene_min > scene_max) throw UsageError("world: need 1 <= scene_min <= scene_max");
    if (scene_max > concepts) {
      throw UsageError("world: scene_max " + std::to_string(scene_max) + " exceeds concept count " +
                       std::to_string(concepts));
    }
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw UsageError(std::string("world: ") + name + " must lie in [0,1]");
    };
    prob(p_cognate, "p_cognate");
    prob(p_noise, "p_noise");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw UsageError("world: noise_sigma must be >= 0");
    if (!(mean_words >= 1.0)) throw UsageError("world: mean_words must be >= 1");
    if (held_out_languages >= languages) throw UsageError("world: at least one training language is required");
    if (languages > 999) throw UsageError("world: at most 999 languages");
  }
};

inline nlohmann::json to_json(const WorldSpec& s) {
  return {{"concepts", s.concepts},
          {"languages", s.languages},
          {"feature_dim", s.feature_dim},
          {"pairs", s.pairs},
          {"scene_min", s.scene_min},
          {"scene_max", s.scene_max},
          {"p_cognate", s.p_cognate},
          {"p_noise", s.p_noise},
          {"noise_sigma", s.noise_sigma},
          {"seed", s.seed},
          {"function_words", s.function_words},
          {"mean_words", s.mean_words},
          {"held_out_languages", s.held_out_languages},
          {"split", {{"train", s.ratios.train}, {"val", s.ratios.val}, {"test", s.ratios.test}}}};
}

/// Fill `s` from JSON. Unknown keys are rejected.
inline void update_from_json(WorldSpec& s, const nlohmann::json& j) {
  for (const auto& [k, v] : j.items()) {
    if (k == "concepts") s.concepts = v.get<std::size_t>();
    else if (k == "languages") s.languages = v.get<std::size_t>();
    else if (k == "feature_dim") s.feature_dim = v.get<std::size_t>();
    else if (k == "pairs") s.pairs = v.get<std::size_t>();
    else if (k == "scene_min") s.scene_min = v.get<std::size_t>();
    else if (k == "scene_max") s.scene_max = v.get<std::size_t>();
    else if (k == "p_cognate") s.p_cognate = v.get<double>();
    else if (k == "p_noise") s.p_noise = v.get<double>();
    else if (k == "noise_sigma") s.noise_sigma = v.get<double>();
    else if (k == "seed") s.seed = v.get<std::uint64_t>();
    else if (k == "function_words") s.function_words = v.get<std::size_t>();
    else if (k == "mean_words") s.mean_words = v.get<double>();
    else if (k == "held_out_languages") s.held_out_languages = v.get<std::size_t>();
    else if (k == "split") {
      for (const auto& [sk, sv] : v.items()) {
        if (sk == "train") s.ratios.train = sv.get<double>();
        else if (sk == "val") s.ratios.val = sv.get<double>();
        else if (sk == "test") s.ratios.test = sv.get<double>();
        else throw UsageError("unknown config key 'world.split." + sk + "'");
      }
    } else {
      throw UsageError("unknown config key 'world." + k + "'");
    }
  }
}

/// Everything a generated world produces. `truth` must only reach evaluation code.
struct World {
  WorldSpec spec;
  std::vector<std::string> languages;  // training languages first, held-out languages last
  Dataset data;
  SplitManifest splits;
  std::vector<ParallelCaption> parallel;
  GroundTruth truth;

  std::vector<std::string> training_languages() const {
    return {languages.begin(), languages.end() - static_cast<std::ptrdiff_t>(spec.held_out_languages)};
  }
};

/// Language code for index i: "l000", "l001", ... (alphabetical order equals index order).
inline std::string language_code(std::size_t i) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "l%03zu", i);
  return buf;
}

namespace detail {

/// Letters available to a language: Latin, Greek or Cyrillic lower case, by index mod 3.
inline std::vector<char32_t> script_letters(std::size_t lang) {
  std::vector<char32_t> out;
  switch (lang % 3) {
    case 0:
      for (char32_t c = U'a'; c <= U'z'; ++c) out.push_back(c);
      break;
    case 1:
      for (char32_t c = 0x03B1; c <= 0x03C9; ++c)
        if (c != 0x03C2) out.push_back(c);  // skip final sigma
      break;
    default:
      for (char32_t c = 0x0430; c <= 0x044F; ++c) out.push_back(c);
      break;
  }
  return out;
}

class WordformSampler {
 public:
  WordformSampler(std::size_t lang, std::mt19937_64& rng) : letters_(script_letters(lang)) {
    std::gamma_distribution<double> g(1.0, 1.0);
    std::vector<double> w(letters_.size());
    for (auto& x : w) x = g(rng) + 0.05;
    pick_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }

  std::string sample(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len) {
    std::uniform_int_distribution<std::size_t> len(min_len, max_len);
    std::string s;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) utf8::append(s, letters_[pick_(rng)]);
    return s;
  }

 private:
  std::vector<char32_t> letters_;
  std::discrete_distribution<std::size_t> pick_;
};

}  // namespace detail

/// Render one caption: content wordforms plus function words, shuffled.
inline std::string render_caption(const GroundTruth& gt, const std::string& lang, const std::vector<int>& concepts,
                                  double mean_words, std::mt19937_64& rng) {
  std::vector<std::string> words;
  const auto& forms = gt.word_map.at(lang);
  for (int c : concepts) words.push_back(forms.at(static_cast<std::size_t>(c)));
  const auto& fw = gt.function_words.at(lang);
  if (!fw.empty()) {
    const double extra_mean = std::max(0.0, mean_words - static_cast<double>(concepts.size()));
    std::poisson_distribution<int> extra(extra_mean);
    std::uniform_int_distribution<std::size_t> pick(0, fw.size() - 1);
    const int n = extra_mean > 0 ? extra(rng) : 0;
    for (int i = 0; i < n; ++i) words.push_back(fw[pick(rng)]);
  }
  std::shuffle(words.begin(), words.end(), rng);
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

/// Generate a synthetic world.
///
/// Scenes are split by image before captions are rendered. Train scenes get one
/// caption in one language; captions in held-out languages form the adapt split.
/// Val scenes are rendered in every training language and test scenes in every
/// language, without corruption.
inline World generate_world(const WorldSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  World w;
  w.spec = spec;
  for (std::size_t l = 0; l < spec.languages; ++l) w.languages.push_back(language_code(l));
  GroundTruth& gt = w.truth;
  gt.languages = w.languages;

  // Lexicon.
  for (std::size_t l = 0; l < spec.languages; ++l) {
    detail::WordformSampler sampler(l, rng);
    std::set<std::string> used;
    std::vector<std::string> forms(spec.concepts);
    std::bernoulli_distribution cognate(spec.p_cognate);
    for (std::size_t c = 0; c < spec.concepts; ++c) {
      if (l > 0 && cognate(rng)) {
        const auto& src = gt.word_map.at(w.languages[0])[c];
        if (used.insert(src).second) {
          forms[c] = src;
          continue;
        }
      }
      std::string f;
      do f = sampler.sample(rng, 4, 8);
      while (used.count(f) || (l > 0 && f == gt.word_map.at(w.languages[0])[c]));
      used.insert(f);
      forms[c] = f;
    }
    std::vector<std::string> fw;
    for (std::size_t k = 0; k < spec.function_words; ++k) {
      std::string f;
      do f = sampler.sample(rng, 2, 3);
      while (!used.insert(f).second);
      fw.push_back(f);
    }
    gt.word_map[w.languages[l]] = std::move(forms);
    gt.function_words[w.languages[l]] = std::move(fw);
  }

  // Concept prototypes and scenes.
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> proto(spec.concepts, std::vector<double>(spec.feature_dim));
  for (auto& p : proto)
    for (auto& x : p) x = unit(rng);

  std::vector<std::vector<int>> scenes(spec.pairs);
  std::vector<ImageRecord> images(spec.pairs);
  std::uniform_int_distribution<std::size_t> scene_size(spec.scene_min, spec.scene_max);
  std::vector<int> all(spec.concepts);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t s = 0; s < spec.pairs; ++s) {
    const std::size_t k = scene_size(rng);
    std::vector<int> pool = all;
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    scenes[s].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    char buf[24];
    std::snprintf(buf, sizeof buf, "img%06zu", s);
    images[s].id = buf;
    images[s].features.resize(spec.feature_dim);
    for (std::size_t f = 0; f < spec.feature_dim; ++f) {
      double v = 0.0;
      for (int c : scenes[s]) v += proto[static_cast<std::size_t>(c)][f];
      v = v / static_cast<double>(k) + spec.noise_sigma * unit(rng);
      images[s].features[f] = static_cast<float>(v);
    }
    gt.image_concepts[images[s].id] = scenes[s];
  }

  // Scene-level split.
  const auto counts = split_counts(spec.pairs, spec.ratios);
  std::vector<std::size_t> order(spec.pairs);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> test_s(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(counts[2]));
  std::vector<std::size_t> val_s(order.begin() + static_cast<std::ptrdiff_t>(counts[2]),
                                 order.begin() + static_cast<std::ptrdiff_t>(counts[2] + counts[1]));
  std::vector<std::size_t> train_s(order.begin() + static_cast<std::ptrdiff_t>(counts[2] + counts[1]),
                                   order.begin() + static_cast<std::ptrdiff_t>(counts[2] + counts[1] + counts[0]));
  std::sort(test_s.begin(), test_s.end());
  std::sort(val_s.begin(), val_s.end());
  std::sort(train_s.begin(), train_s.end());

  std::vector<CaptionRecord> captions;
  std::size_t next_caption = 0;
  auto new_caption = [&](const std::string& lang, const std::vector<int>& concepts, std::size_t scene) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "cap%07zu", next_caption++);
    CaptionRecord r{buf, lang, render_caption(gt, lang, concepts, spec.mean_words, rng), images[scene].id, {}};
    gt.caption_concepts[r.id] = concepts;
    captions.push_back(r);
    return captions.back().id;
  };

  const std::size_t n_train_lang = spec.languages - spec.held_out_languages;
  std::uniform_int_distribution<std::size_t> any_lang(0, spec.languages - 1);
  std::uniform_int_distribution<std::size_t> train_lang(0, n_train_lang - 1);
  std::bernoulli_distribution corrupt(spec.p_noise);
  std::uniform_int_distribution<std::size_t> other(0, train_s.empty() ? 0 : train_s.size() - 1);
  for (std::size_t idx = 0; idx < train_s.size(); ++idx) {
    const std::size_t s = train_s[idx];
    const std::size_t l = any_lang(rng);
    const std::string& lang = w.languages[l];
    std::vector<int> described = scenes[s];
    bool corrupted = false;
    if (train_s.size() > 1 && corrupt(rng)) {
      // Another scene with different content; give up after a bounded number of draws.
      auto key = [](std::vector<int> v) {
        std::sort(v.begin(), v.end());
        return v;
      };
      const auto own = key(scenes[s]);
      for (int attempt = 0; attempt < 64 && !corrupted; ++attempt) {
        const std::size_t o = other(rng);
        if (o != idx && key(scenes[train_s[o]]) != own) {
          described = scenes[train_s[o]];
          corrupted = true;
        }
      }
    }
    const std::string id = new_caption(lang, described, s);
    if (corrupted) gt.corrupted.insert(id);
    if (l < n_train_lang) {
      w.splits.train.push_back(id);
      if (n_train_lang > 1) {
        std::size_t t;
        do t = train_lang(rng);
        while (t == l);
        const std::string& tl = w.languages[t];
        w.parallel.push_back({id, {id + "-" + tl, tl, render_caption(gt, tl, described, spec.mean_words, rng),
                                   images[s].id, {}}});
      }
    } else {
      w.splits.adapt.push_back(id);
    }
  }
  auto render_group = [&](std::size_t s, std::size_t n_lang, std::vector<std::string>& ids,
                          std::vector<ParaphraseGroup>& groups) {
    ParaphraseGroup g{images[s].id, {}};
    for (std::size_t l = 0; l < n_lang; ++l) {
      const std::string id = new_caption(w.languages[l], scenes[s], s);
      ids.push_back(id);
      g.captions[w.languages[l]] = id;
    }
    groups.push_back(std::move(g));
  };
  for (std::size_t s : val_s) render_group(s, n_train_lang, w.splits.val, w.splits.val_groups);
  for (std::size_t s : test_s) render_group(s, spec.languages, w.splits.test, w.splits.test_groups);

  w.data = Dataset(std::move(captions), std::move(images));
  return w;
}

}  // namespace pivot
