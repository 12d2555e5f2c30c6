#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "pivot/errors.hpp"

namespace pivot {

/// Architecture of both encoder branches.
struct ModelConfig {
  std::size_t layers = 2;          // M
  std::size_t heads = 4;
  std::size_t hidden = 64;         // d
  std::size_t head_dim = 32;       // D, output embedding size
  std::size_t max_len = 64;        // tokens including [SEQ]
  std::size_t vocab_size = 0;      // filled from the tokenizer when 0
  std::size_t image_feat_dim = 32; // F
  std::string precision = "f32";
  double init_std = 0.02;          // embeddings and biases
  std::uint64_t seed = 0;

  void validate() const {
    if (layers < 1) throw UsageError("model: layers must be >= 1");
    if (heads < 1 || hidden % heads != 0) {
      throw UsageError("model: hidden " + std::to_string(hidden) + " is not divisible by heads " +
                       std::to_string(heads));
    }
    if (head_dim < 1 || head_dim > hidden) throw UsageError("model: need 1 <= head_dim <= hidden");
    if (max_len < 2) throw UsageError("model: max_len must be >= 2");
    if (vocab_size < 5) throw UsageError("model: vocab_size must cover the special tokens");
    if (image_feat_dim < 1) throw UsageError("model: image_feat_dim must be >= 1");
    if (precision != "f32" && precision != "f64") throw UsageError("model: precision must be f32 or f64");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"layers", c.layers},       {"heads", c.heads},
          {"hidden", c.hidden},       {"head_dim", c.head_dim},
          {"max_len", c.max_len},     {"vocab_size", c.vocab_size},
          {"image_feat_dim", c.image_feat_dim}, {"precision", c.precision},
          {"init_std", c.init_std},   {"seed", c.seed}};
}

inline void update_from_json(ModelConfig& c, const nlohmann::json& j) {
  for (const auto& [k, v] : j.items()) {
    if (k == "layers") c.layers = v.get<std::size_t>();
    else if (k == "heads") c.heads = v.get<std::size_t>();
    else if (k == "hidden") c.hidden = v.get<std::size_t>();
    else if (k == "head_dim") c.head_dim = v.get<std::size_t>();
    else if (k == "max_len") c.max_len = v.get<std::size_t>();
    else if (k == "vocab_size") c.vocab_size = v.get<std::size_t>();
    else if (k == "image_feat_dim") c.image_feat_dim = v.get<std::size_t>();
    else if (k == "precision") c.precision = v.get<std::string>();
    else if (k == "init_std") c.init_std = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else throw UsageError("unknown config key 'model." + k + "'");
  }
}

}  // namespace pivot
