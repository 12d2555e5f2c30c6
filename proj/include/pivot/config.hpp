#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "pivot/corpus/io.hpp"
#include "pivot/corpus/world.hpp"
#include "pivot/errors.hpp"
#include "pivot/losses/losses.hpp"
#include "pivot/model/config.hpp"
#include "pivot/trainer/trainer.hpp"

namespace pivot {

struct TokenizerConfig {
  std::size_t vocab_size = 2000;
};

struct EvalConfig {
  std::size_t n_queries = 50;
  std::size_t pairs_per_language = 200;
  std::size_t clusters = 50;
  std::size_t cluster_restarts = 20;
  std::size_t recall_k = 10;
  bool exclude_identical = true;
  std::size_t probe_epochs = 1;
  std::uint64_t seed = 0;
};

struct AlignConfig {
  std::size_t min_count = 3;
  std::size_t k = 5;
  std::size_t gt_top = 5;
  std::size_t max_rounds = 10;
  double tol = 1e-4;
};

/// Every module's settings; one JSON object with a section per module.
struct RunConfig {
  WorldSpec world;
  TokenizerConfig tokenizer;
  ModelConfig model;
  LossConfig losses;
  TrainConfig train;
  EvalConfig eval;
  AlignConfig align;
};

namespace detail {

template <class F>
void read_keys(const nlohmann::json& j, const std::string& section, F&& assign) {
  if (!j.is_object()) throw UsageError("config section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    try {
      if (!assign(k, v)) throw UsageError("unknown config key '" + section + "." + k + "'");
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config key '" + section + "." + k + "': " + e.what());
    }
  }
}

}  // namespace detail

inline nlohmann::json to_json(const TokenizerConfig& c) { return {{"vocab_size", c.vocab_size}}; }

inline nlohmann::json to_json(const EvalConfig& c) {
  return {{"n_queries", c.n_queries}, {"pairs_per_language", c.pairs_per_language},
          {"clusters", c.clusters},   {"cluster_restarts", c.cluster_restarts},
          {"recall_k", c.recall_k},   {"exclude_identical", c.exclude_identical},
          {"probe_epochs", c.probe_epochs}, {"seed", c.seed}};
}

inline nlohmann::json to_json(const AlignConfig& c) {
  return {{"min_count", c.min_count}, {"k", c.k}, {"gt_top", c.gt_top}, {"max_rounds", c.max_rounds}, {"tol", c.tol}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"world", to_json(c.world)},   {"tokenizer", to_json(c.tokenizer)}, {"model", to_json(c.model)},
          {"losses", to_json(c.losses)}, {"train", to_json(c.train)},         {"eval", to_json(c.eval)},
          {"align", to_json(c.align)}};
}

/// Merge a (possibly partial) config object. Unknown sections or keys are usage errors.
inline void update_from_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [section, v] : j.items()) {
    try {
      if (section == "world") update_from_json(c.world, v);
      else if (section == "model") update_from_json(c.model, v);
      else if (section == "losses") update_from_json(c.losses, v);
      else if (section == "train") update_from_json(c.train, v);
      else if (section == "tokenizer") {
        detail::read_keys(v, section, [&](const std::string& k, const nlohmann::json& x) {
          if (k == "vocab_size") c.tokenizer.vocab_size = x.get<std::size_t>();
          else return false;
          return true;
        });
      } else if (section == "eval") {
        detail::read_keys(v, section, [&](const std::string& k, const nlohmann::json& x) {
          auto& e = c.eval;
          if (k == "n_queries") e.n_queries = x.get<std::size_t>();
          else if (k == "pairs_per_language") e.pairs_per_language = x.get<std::size_t>();
          else if (k == "clusters") e.clusters = x.get<std::size_t>();
          else if (k == "cluster_restarts") e.cluster_restarts = x.get<std::size_t>();
          else if (k == "recall_k") e.recall_k = x.get<std::size_t>();
          else if (k == "exclude_identical") e.exclude_identical = x.get<bool>();
          else if (k == "probe_epochs") e.probe_epochs = x.get<std::size_t>();
          else if (k == "seed") e.seed = x.get<std::uint64_t>();
          else return false;
          return true;
        });
      } else if (section == "align") {
        detail::read_keys(v, section, [&](const std::string& k, const nlohmann::json& x) {
          auto& a = c.align;
          if (k == "min_count") a.min_count = x.get<std::size_t>();
          else if (k == "k") a.k = x.get<std::size_t>();
          else if (k == "gt_top") a.gt_top = x.get<std::size_t>();
          else if (k == "max_rounds") a.max_rounds = x.get<std::size_t>();
          else if (k == "tol") a.tol = x.get<double>();
          else return false;
          return true;
        });
      } else {
        throw UsageError("unknown config section '" + section + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config section '" + section + "': " + e.what());
    }
  }
}

/// Apply one dotted override such as "train.epochs=5". The value is read as JSON when it
/// parses, otherwise as a string.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  const auto dot = key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == key.size() || key.find('.', dot + 1) != std::string::npos) {
    throw UsageError("override key '" + key + "' must be section.key");
  }
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  update_from_json(c, {{key.substr(0, dot), {{key.substr(dot + 1), value}}}});
}

inline RunConfig load_run_config(const std::filesystem::path& p) {
  RunConfig c;
  nlohmann::json j;
  try {
    j = io::read_json(p);
  } catch (const DataError& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  update_from_json(c, j);
  return c;
}

}  // namespace pivot
