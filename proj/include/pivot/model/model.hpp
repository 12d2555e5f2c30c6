#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivot/diffcore/checkpoint.hpp"
#include "pivot/diffcore/graph.hpp"
#include "pivot/diffcore/matmul.hpp"
#include "pivot/diffcore/params.hpp"
#include "pivot/errors.hpp"
#include "pivot/log.hpp"
#include "pivot/model/config.hpp"
#include "pivot/tokenizer/bpe.hpp"

namespace pivot {

/// Padded token batch. Row b*seq_len+t holds token t of sequence b.
struct TextBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> valid;
  std::vector<std::size_t> lengths;
  std::size_t truncated = 0;
};

/// Pad sequences to a common length, truncating anything longer than `max_len`.
/// Every sequence must start with [SEQ] and use ids below `vocab_size`.
inline TextBatch make_text_batch(const std::vector<std::vector<TokenId>>& seqs, std::size_t max_len,
                                 std::size_t vocab_size) {
  TextBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.seq_len = std::max(b.seq_len, std::min(s.size(), max_len));
  b.ids.assign(b.batch * b.seq_len, special::pad);
  b.valid.assign(b.batch * b.seq_len, 0);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    if (s.empty() || s.front() != special::seq) {
      throw DataError("text batch: sequence " + std::to_string(i) + " does not start with [SEQ]");
    }
    const std::size_t n = std::min(s.size(), max_len);
    if (s.size() > max_len) ++b.truncated;
    for (std::size_t t = 0; t < n; ++t) {
      if (s[t] >= vocab_size) {
        throw DataError("text batch: token id " + std::to_string(s[t]) + " >= vocabulary size " +
                        std::to_string(vocab_size));
      }
      b.ids[i * b.seq_len + t] = s[t];
      b.valid[i * b.seq_len + t] = 1;
    }
    b.lengths.push_back(n);
  }
  if (b.truncated) {
    logging::warn("truncated " + std::to_string(b.truncated) + " sequence(s) to " + std::to_string(max_len) + " tokens");
  }
  return b;
}

template <class T>
struct TextOutput {
  Var<T> z;       // batch x D, unit rows
  Var<T> hidden;  // batch*seq_len x d, final layer after layer norm
};

/// Text and image encoders sharing one embedding space.
template <class T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  /// Word embedding plus learned position embedding for every token.
  Var<T> embed_tokens(Graph<T>& g, const TextBatch& b) const {
    std::vector<std::size_t> pos(b.batch * b.seq_len);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % b.seq_len;
    if (b.seq_len > cfg_.max_len) throw DataError("embed_tokens: sequence longer than max_len");
    return add(gather_rows(g.param("tok_emb"), b.ids), gather_rows(g.param("pos_emb"), std::move(pos)));
  }

  /// Multi-head self-attention followed by the output projection (no residual, no norm).
  Var<T> self_attention(Graph<T>& g, std::size_t layer, const Var<T>& x, const TextBatch& b) const {
    const std::string p = prefix(layer);
    auto q = matmul(x, g.param(p + "wq"));
    auto k = matmul(x, g.param(p + "wk"));
    auto v = matmul(x, g.param(p + "wv"));
    auto a = attention(q, k, v, b.valid, b.batch, b.seq_len, cfg_.heads,
                       T(1) / std::sqrt(static_cast<T>(cfg_.hidden)));
    return matmul(a, g.param(p + "wo"));
  }

  /// Pre-norm residual block: attention sublayer then GELU feed-forward sublayer.
  Var<T> transformer_block(Graph<T>& g, std::size_t layer, const Var<T>& h, const TextBatch& b) const {
    const std::string p = prefix(layer);
    auto x = add(h, self_attention(g, layer, layer_norm_rows(h, g.param(p + "ln1.g"), g.param(p + "ln1.b")), b));
    auto n = layer_norm_rows(x, g.param(p + "ln2.g"), g.param(p + "ln2.b"));
    auto f = gelu(add_row(matmul(n, g.param(p + "ff1.w")), g.param(p + "ff1.b")));
    return add(x, add_row(matmul(f, g.param(p + "ff2.w")), g.param(p + "ff2.b")));
  }

  TextOutput<T> encode_text(Graph<T>& g, const TextBatch& b) const {
    for (std::size_t i = 0; i < b.batch; ++i) {
      if (b.seq_len == 0 || b.ids[i * b.seq_len] != special::seq) {
        throw DataError("encode_text: sequence " + std::to_string(i) + " does not start with [SEQ]");
      }
    }
    auto h = embed_tokens(g, b);
    for (std::size_t l = 0; l < cfg_.layers; ++l) h = transformer_block(g, l, h, b);
    h = layer_norm_rows(h, g.param("final_ln.g"), g.param("final_ln.b"));
    std::vector<std::size_t> first(b.batch);
    for (std::size_t i = 0; i < b.batch; ++i) first[i] = i * b.seq_len;
    auto head = add_row(matmul(gather_rows(h, std::move(first)), g.param("text_head.w")), g.param("text_head.b"));
    return {l2_normalize_rows(head), h};
  }

  /// features: batch x F.
  Var<T> encode_image(Graph<T>& g, const Var<T>& features) const {
    if (features.cols() != cfg_.image_feat_dim) {
      throw DataError("encode_image: feature length " + std::to_string(features.cols()) + " != " +
                      std::to_string(cfg_.image_feat_dim));
    }
    auto h = gelu(add_row(matmul(features, g.param("img.l1.w")), g.param("img.l1.b")));
    h = gelu(add_row(matmul(h, g.param("img.l2.w")), g.param("img.l2.b")));
    return l2_normalize_rows(add_row(matmul(h, g.param("img_head.w")), g.param("img_head.b")));
  }

  /// Vocabulary logits for the selected hidden rows.
  Var<T> cloze_logits(Graph<T>& g, const Var<T>& hidden, std::vector<std::size_t> rows) const {
    return add_row(matmul(gather_rows(hidden, std::move(rows)), g.param("cloze.w")), g.param("cloze.b"));
  }

  static bool is_image_param(const std::string& name) { return name.rfind("img", 0) == 0; }

  std::string save(const nlohmann::json& extra = nlohmann::json::object()) const {
    nlohmann::json meta = extra;
    meta["model"] = to_json(cfg_);
    return encode_checkpoint(params_, meta);
  }

  static Model load(const std::string& bytes) {
    auto ck = decode_checkpoint(bytes);
    if (!ck.meta.contains("model")) throw DataError("checkpoint: no model configuration");
    ModelConfig cfg;
    update_from_json(cfg, ck.meta.at("model"));
    Model m(cfg);
    load_into(m.params_, ck);
    return m;
  }

 private:
  static std::string prefix(std::size_t layer) { return "layer" + std::to_string(layer) + "."; }

  void init() {
    std::mt19937_64 rng(cfg_.seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    const std::size_t d = cfg_.hidden;
    auto normal = [&](Shape s, double sd) {
      Tensor<T> t(s, T{0});
      for (auto& x : t.storage()) x = static_cast<T>(sd * unit(rng));
      return t;
    };
    auto linear = [&](const std::string& name, std::size_t in, std::size_t out, bool bias) {
      params_.add(name + (bias ? ".w" : ""), normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
      if (bias) params_.add(name + ".b", normal({1, out}, cfg_.init_std));
    };
    auto norm = [&](const std::string& name) {
      params_.add(name + ".g", Tensor<T>({1, d}, T{1}));
      params_.add(name + ".b", Tensor<T>({1, d}, T{0}));
    };
    params_.add("tok_emb", normal({cfg_.vocab_size, d}, cfg_.init_std * 5));
    params_.add("pos_emb", normal({cfg_.max_len, d}, cfg_.init_std * 5));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = prefix(l);
      norm(p + "ln1");
      linear(p + "wq", d, d, false);
      linear(p + "wk", d, d, false);
      linear(p + "wv", d, d, false);
      linear(p + "wo", d, d, false);
      norm(p + "ln2");
      linear(p + "ff1", d, 4 * d, true);
      linear(p + "ff2", 4 * d, d, true);
    }
    norm("final_ln");
    linear("text_head", d, cfg_.head_dim, true);
    linear("img.l1", cfg_.image_feat_dim, d, true);
    linear("img.l2", d, d, true);
    linear("img_head", d, cfg_.head_dim, true);
    linear("cloze", d, cfg_.vocab_size, true);
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
};

/// (a.b + 1) / 2 for unit vectors; rejects inputs whose norm is off by more than 1e-4.
template <class T>
T similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw std::invalid_argument("similarity: length mismatch");
  T dot{0}, na{0}, nb{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (std::abs(std::sqrt(na) - T(1)) > T(1e-4) || std::abs(std::sqrt(nb) - T(1)) > T(1e-4)) {
    throw NumericError("similarity: inputs must be unit vectors");
  }
  return (dot + T(1)) / T(2);
}

/// Pairwise similarity between rows of a and rows of b on the tape.
template <class T>
Var<T> similarity_matrix(const Var<T>& a, const Var<T>& b) {
  return add_scalar(scale(matmul(a, b, false, true), T(0.5)), T(0.5));
}

/// Pairwise similarity between rows of unit-row matrices.
template <class T>
Tensor<T> similarity_matrix(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("similarity_matrix: width mismatch");
  Tensor<T> s = Tensor<T>::matrix(a.rows(), b.rows());
  gemm(a.data().data(), b.data().data(), s.data().data(), a.rows(), a.cols(), b.rows(), false, true);
  for (auto& x : s.storage()) x = (x + T(1)) / T(2);
  return s;
}

/// Inference-only sentence embeddings (n x D), computed in chunks.
template <class T>
Tensor<T> embed_texts(Model<T>& m, const std::vector<std::vector<TokenId>>& seqs, std::size_t chunk = 256) {
  const std::size_t D = m.config().head_dim;
  Tensor<T> out = Tensor<T>::matrix(seqs.size(), D);
  for (std::size_t s = 0; s < seqs.size(); s += chunk) {
    const std::size_t e = std::min(seqs.size(), s + chunk);
    std::vector<std::vector<TokenId>> part(seqs.begin() + static_cast<std::ptrdiff_t>(s),
                                           seqs.begin() + static_cast<std::ptrdiff_t>(e));
    Graph<T> g(&m.params(), false);
    auto z = m.encode_text(g, make_text_batch(part, m.config().max_len, m.config().vocab_size)).z;
    std::copy(z.value().data().begin(), z.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(s * D));
  }
  return out;
}

/// Inference-only image embeddings (n x D) from an n x F feature matrix.
template <class T>
Tensor<T> embed_images(Model<T>& m, const Tensor<T>& features, std::size_t chunk = 1024) {
  const std::size_t D = m.config().head_dim, F = features.cols(), n = features.rows();
  Tensor<T> out = Tensor<T>::matrix(n, D);
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t e = std::min(n, s + chunk);
    std::vector<T> part(features.data().begin() + static_cast<std::ptrdiff_t>(s * F),
                        features.data().begin() + static_cast<std::ptrdiff_t>(e * F));
    Graph<T> g(&m.params(), false);
    auto z = m.encode_image(g, g.constant(Tensor<T>({e - s, F}, std::move(part))));
    std::copy(z.value().data().begin(), z.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(s * D));
  }
  return out;
}

}  // namespace pivot
