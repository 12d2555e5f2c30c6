#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pivot/corpus/io.hpp"
#include "pivot/diffcore/graph.hpp"
#include "pivot/diffcore/params.hpp"
#include "pivot/errors.hpp"
#include "pivot/eval/sentence.hpp"
#include "pivot/log.hpp"
#include "pivot/losses/losses.hpp"
#include "pivot/model/model.hpp"

namespace pivot {

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t val_every = 1;
  std::size_t val_queries = 50;
  double clip_norm = 5.0;
  bool supervised_alpha = false;
  bool save_checkpoints = true;
  std::size_t adapt_epochs = 1;
  std::size_t adapt_anchors = 64;

  void validate(const LossConfig& lc) const {
    if (batch_size < 2 && (lc.use_lt || lc.use_lx || lc.use_lv)) {
      throw UsageError("train: batch_size must be >= 2 when a contrastive loss is enabled");
    }
    if (batch_size < 1 || epochs < 1 || val_every < 1) throw UsageError("train: batch_size, epochs, val_every >= 1");
    if (!(lr > 0)) throw UsageError("train: lr must be > 0");
    if (!(clip_norm > 0)) throw UsageError("train: clip_norm must be > 0");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"epochs", c.epochs},
          {"lr", c.lr},                 {"seed", c.seed},
          {"val_every", c.val_every},   {"val_queries", c.val_queries},
          {"clip_norm", c.clip_norm},   {"supervised_alpha", c.supervised_alpha},
          {"save_checkpoints", c.save_checkpoints}, {"adapt_epochs", c.adapt_epochs},
          {"adapt_anchors", c.adapt_anchors}};
}

inline void update_from_json(TrainConfig& c, const nlohmann::json& j) {
  for (const auto& [k, v] : j.items()) {
    if (k == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (k == "epochs") c.epochs = v.get<std::size_t>();
    else if (k == "lr") c.lr = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "val_every") c.val_every = v.get<std::size_t>();
    else if (k == "val_queries") c.val_queries = v.get<std::size_t>();
    else if (k == "clip_norm") c.clip_norm = v.get<double>();
    else if (k == "supervised_alpha") c.supervised_alpha = v.get<bool>();
    else if (k == "save_checkpoints") c.save_checkpoints = v.get<bool>();
    else if (k == "adapt_epochs") c.adapt_epochs = v.get<std::size_t>();
    else if (k == "adapt_anchors") c.adapt_anchors = v.get<std::size_t>();
    else throw UsageError("unknown config key 'train." + k + "'");
  }
}

/// A tokenised caption and the row of its image in TrainingSet::features.
struct TextRecord {
  std::string id;
  std::string lang;
  std::vector<TokenId> tokens;
  std::size_t image = 0;
};

/// Everything the optimiser may see: captions, image features, validation groups.
struct TrainingSet {
  std::size_t feature_dim = 0;
  std::vector<float> features;
  std::vector<std::string> image_ids;
  std::vector<TextRecord> train;
  std::vector<TextRecord> parallel;            // translations for the supervised baseline
  std::vector<std::size_t> parallel_source;    // index into `train`
  std::vector<TextRecord> adapt;
  ParaphraseSet val;

  const float* feature_row(std::size_t image) const { return features.data() + image * feature_dim; }
};

/// Build a training set from a loaded corpus whose captions are already tokenised.
inline TrainingSet make_training_set(const CorpusBundle& b, const Vocabulary& vocab) {
  TrainingSet ts;
  const auto& data = b.data;
  ts.feature_dim = data.feature_dim();
  for (const auto& im : data.images()) {
    ts.image_ids.push_back(im.id);
    ts.features.insert(ts.features.end(), im.features.begin(), im.features.end());
  }
  auto record = [&](const CaptionRecord& c) {
    return TextRecord{c.id, c.lang, c.tokens.empty() ? vocab.encode(c.text) : c.tokens, data.image_index(c.image_id)};
  };
  std::unordered_map<std::string, std::size_t> train_pos;
  for (const auto& id : b.splits.train) {
    train_pos[id] = ts.train.size();
    ts.train.push_back(record(data.caption(id)));
  }
  for (const auto& id : b.splits.adapt) ts.adapt.push_back(record(data.caption(id)));
  for (const auto& p : b.parallel) {
    auto it = train_pos.find(p.source_id);
    if (it == train_pos.end()) continue;
    ts.parallel.push_back(record(p.caption));
    ts.parallel_source.push_back(it->second);
  }
  if (!b.splits.val_groups.empty()) ts.val = make_paraphrase_set(data, b.splits.val_groups, b.training_languages());
  return ts;
}

/// Feature-space stand-in for image augmentation: Gaussian noise plus coordinate dropout.
struct Augmenter {
  double sigma = 0.1;
  double dropout = 0.1;

  template <class T>
  void apply(const float* x, std::size_t n, T* out, std::mt19937_64& rng) const {
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      double v = static_cast<double>(x[i]) + sigma * noise(rng);
      if (dropout > 0 && u(rng) < dropout) v = 0.0;
      out[i] = static_cast<T>(v);
    }
  }
};

template <class T>
struct Batch {
  std::vector<std::string> ids;
  TextBatch text;            // cloze-corrupted when the plan is non-empty
  ClozePlan cloze;
  Tensor<T> features;        // n x F
  Tensor<T> view1, view2;    // augmented copies of `features`
  std::optional<Tensor<T>> alpha;  // fixed pair weights (supervised baseline)
};

/// Assemble a batch. Deterministic for a given seed.
template <class T>
Batch<T> build_batch(const std::vector<const TextRecord*>& recs, const TrainingSet& ts, const Augmenter& aug,
                     const LossConfig& lc, const ModelConfig& mc, std::uint64_t seed) {
  if (recs.size() < 2 && (lc.use_lt || lc.use_lx || lc.use_lv)) {
    throw DataError("build_batch: contrastive losses need at least two records");
  }
  std::mt19937_64 rng(seed);
  Batch<T> b;
  std::vector<std::vector<TokenId>> seqs;
  for (const auto* r : recs) {
    b.ids.push_back(r->id);
    seqs.push_back(r->tokens);
  }
  b.text = make_text_batch(seqs, mc.max_len, mc.vocab_size);
  if (lc.use_lc) b.cloze = make_cloze_plan(b.text, mc.vocab_size, rng, lc.cloze_select, lc.cloze_mask, lc.cloze_random);
  const std::size_t n = recs.size(), F = ts.feature_dim;
  b.features = Tensor<T>::matrix(n, F);
  b.view1 = Tensor<T>::matrix(n, F);
  b.view2 = Tensor<T>::matrix(n, F);
  for (std::size_t i = 0; i < n; ++i) {
    const float* x = ts.feature_row(recs[i]->image);
    for (std::size_t f = 0; f < F; ++f) b.features(i, f) = static_cast<T>(x[f]);
    aug.apply(x, F, &b.view1(i, 0), rng);
    aug.apply(x, F, &b.view2(i, 0), rng);
  }
  return b;
}

/// 0/1 pair weights from known pairings of batch ids.
template <class T>
Tensor<T> supervised_alpha_mode(const std::vector<std::string>& batch_ids,
                                const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < batch_ids.size(); ++i) pos[batch_ids[i]] = i;
  Tensor<T> a = Tensor<T>::matrix(batch_ids.size(), batch_ids.size());
  for (const auto& [x, y] : pairs) {
    auto ix = pos.find(x), iy = pos.find(y);
    if (ix == pos.end() || iy == pos.end()) {
      throw DataError("supervised alpha: pair (" + x + ", " + y + ") references an id outside the batch");
    }
    if (ix->second == iy->second) continue;
    a(ix->second, iy->second) = a(iy->second, ix->second) = T{1};
  }
  return a;
}

template <class T>
Tensor<T> concat_tensors(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("concat_tensors: width mismatch");
  std::vector<T> v = a.storage();
  v.insert(v.end(), b.storage().begin(), b.storage().end());
  return Tensor<T>({a.rows() + b.rows(), a.cols()}, std::move(v));
}

/// Total objective for one batch on graph `g`. `fixed_alpha` overrides the transitive weights.
template <class T>
Var<T> batch_objective(Graph<T>& g, const Model<T>& model, const Batch<T>& b, const LossConfig& lc,
                       LossTerms* terms = nullptr, const Tensor<T>* fixed_alpha = nullptr) {
  std::optional<Var<T>> lt, lv, lx, lc_term;
  const bool need_text = lc.use_lt || lc.use_lx || lc.use_lc;
  const bool supervised = b.alpha.has_value() || fixed_alpha != nullptr;
  const bool need_image = lc.use_lx || (lc.use_lt && !supervised);
  TextOutput<T> text;
  Var<T> img;
  if (need_text) text = model.encode_text(g, b.text);
  if (need_image) img = model.encode_image(g, g.constant(b.features));
  if (lc.use_lt) {
    auto beta = similarity_matrix(text.z, text.z);
    if (fixed_alpha) {
      lt = loss_t(beta, *fixed_alpha, lc.tau);
    } else if (b.alpha) {
      lt = loss_t(beta, *b.alpha, lc.tau);
    } else if (lc.alpha_grad_flow) {
      auto cross = diagonal(similarity_matrix(img, text.z));
      lt = loss_t(beta, transitive_alpha(cross, similarity_matrix(img, img), lc.margin_m), lc.tau);
    } else {
      const auto cross = similarity_matrix(img.value(), text.z.value());
      std::vector<T> diag(b.ids.size());
      for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = cross(i, i);
      const auto iv = similarity_matrix(img.value(), img.value());
      lt = loss_t(beta, transitive_alpha<T>(diag, iv, lc.margin_m), lc.tau);
    }
  }
  if (lc.use_lv) {
    auto views = model.encode_image(g, g.constant(concat_tensors(b.view1, b.view2)));
    lv = loss_v(views, lc.tau, lc.lv_both_orders);
  }
  if (lc.use_lx) lx = loss_x(img, text.z, lc.tau);
  if (lc.use_lc) lc_term = loss_cloze(model.cloze_logits(g, text.hidden, b.cloze.rows), b.cloze.targets);
  return total_loss<T>(g, lt, lv, lx, lc_term, lc, terms);
}

/// Stable 64-bit mix of a seed and step coordinates (splitmix64 finaliser).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ull) ^ (b * 0xC2B2AE3D27D4EB4Full);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct TrainResult {
  std::size_t best_epoch = 0;
  double best_val = -1;
  double initial_loss = 0;      // first batch, before any update
  double first_epoch_loss = 0;  // mean over the first epoch
  double last_epoch_loss = 0;
  std::vector<nlohmann::json> metrics;
};

namespace detail {

/// Batches of record indices for one epoch. Supervised batches pair each source with its translation.
inline std::vector<std::vector<const TextRecord*>> epoch_batches(const TrainingSet& ts, const TrainConfig& tc,
                                                                 std::size_t epoch,
                                                                 std::vector<std::vector<std::pair<std::string, std::string>>>* pairs) {
  std::mt19937_64 rng(mix_seed(tc.seed, 0xE70C, epoch));
  std::vector<std::vector<const TextRecord*>> out;
  if (!tc.supervised_alpha) {
    std::vector<std::size_t> order(ts.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s + 1 < order.size() || (s < order.size() && order.size() == 1); s += tc.batch_size) {
      std::vector<const TextRecord*> b;
      for (std::size_t i = s; i < std::min(order.size(), s + tc.batch_size); ++i) b.push_back(&ts.train[order[i]]);
      if (b.size() >= 2 || order.size() == 1) out.push_back(std::move(b));
    }
    return out;
  }
  if (ts.parallel.empty()) throw DataError("supervised alpha: the corpus has no parallel captions");
  std::vector<std::size_t> order(ts.parallel.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t half = std::max<std::size_t>(1, tc.batch_size / 2);
  for (std::size_t s = 0; s < order.size(); s += half) {
    std::vector<const TextRecord*> b;
    std::vector<std::pair<std::string, std::string>> pr;
    for (std::size_t i = s; i < std::min(order.size(), s + half); ++i) {
      const auto& src = ts.train[ts.parallel_source[order[i]]];
      const auto& tr = ts.parallel[order[i]];
      b.push_back(&src);
      b.push_back(&tr);
      pr.emplace_back(src.id, tr.id);
    }
    out.push_back(std::move(b));
    pairs->push_back(std::move(pr));
  }
  return out;
}

inline void write_best_pointer(const std::filesystem::path& dir, std::size_t epoch, double val) {
  nlohmann::json j = {{"epoch", epoch}, {"path", "checkpoints/epoch-" + std::to_string(epoch) + ".gtck"},
                      {"val_accuracy", val}};
  io::write_json(dir / "best.json", j);
}

}  // namespace detail

/// Optimise `model` on the training split. Parameters end at the validation-best epoch.
/// When `run_dir` is given, metrics.jsonl, per-epoch checkpoints and best.json are written there.
template <class T>
TrainResult train(Model<T>& model, const TrainingSet& ts, const TrainConfig& tc, const LossConfig& lc,
                  const std::optional<std::filesystem::path>& run_dir = std::nullopt) {
  tc.validate(lc);
  lc.validate();
  if (ts.train.empty()) throw DataError("train: empty training split");
  if (ts.feature_dim != model.config().image_feat_dim) {
    throw DataError("train: feature dimension " + std::to_string(ts.feature_dim) + " does not match the model's " +
                    std::to_string(model.config().image_feat_dim));
  }
  const Augmenter aug{lc.aug_sigma, lc.aug_dropout};
  const AdamConfig adam{tc.lr, 0.9, 0.999, 1e-8};
  const bool has_val = ts.val.groups() > 0 && ts.val.languages.size() >= 2;
  const ParaphraseSet val = has_val ? sample_groups(ts.val, tc.val_queries, mix_seed(tc.seed, 0x7A1)) : ParaphraseSet{};
  std::ofstream metrics_out;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir / "checkpoints");
    metrics_out.open(*run_dir / "metrics.jsonl", std::ios::trunc);
  }

  TrainResult res;
  std::vector<Tensor<T>> best_params = model.params().snapshot();
  bool first_step = true;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::vector<std::pair<std::string, std::string>>> pairs;
    auto batches = detail::epoch_batches(ts, tc, epoch, &pairs);
    LossTerms sum_terms;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      auto batch = build_batch<T>(batches[bi], ts, aug, lc, model.config(), mix_seed(tc.seed, epoch, bi + 1));
      if (tc.supervised_alpha) batch.alpha = supervised_alpha_mode<T>(batch.ids, pairs[bi]);
      LossTerms terms;
      if (!lc.any_enabled()) continue;
      model.params().zero_grad();
      {
        Graph<T> g(&model.params());
        auto fail = [&](const std::string& what) {
          std::string ids;
          for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ",") + id;
          return NumericError(what + " at epoch " + std::to_string(epoch) + " batch " + std::to_string(bi) +
                              "; records: " + ids);
        };
        Var<T> loss;
        try {
          loss = batch_objective(g, model, batch, lc, &terms);
        } catch (const NumericError& e) {
          throw fail(e.what());
        }
        if (!std::isfinite(terms.total)) throw fail("non-finite loss");
        g.backward(loss);
      }
      model.params().clip_grad_norm(tc.clip_norm);
      adam_step(model.params(), adam);
      if (first_step) {
        res.initial_loss = terms.total;
        first_step = false;
      }
      sum_terms.lt += terms.lt;
      sum_terms.lv += terms.lv;
      sum_terms.lx += terms.lx;
      sum_terms.lc += terms.lc;
      sum_terms.total += terms.total;
    }
    const double nb = static_cast<double>(std::max<std::size_t>(1, batches.size()));
    const double mean_loss = sum_terms.total / nb;
    if (epoch == 1) res.first_epoch_loss = mean_loss;
    res.last_epoch_loss = mean_loss;

    if (epoch % tc.val_every == 0 || epoch == tc.epochs) {
      const double acc = has_val ? sentence_retrieval_eval(model, val).accuracy : -mean_loss;
      nlohmann::json rec = {{"epoch", epoch},
                            {"steps", model.params().step()},
                            {"loss", mean_loss},
                            {"l_t", sum_terms.lt / nb},
                            {"l_v", sum_terms.lv / nb},
                            {"l_x", sum_terms.lx / nb},
                            {"l_c", sum_terms.lc / nb},
                            {"val_accuracy", has_val ? nlohmann::json(acc) : nlohmann::json(nullptr)}};
      res.metrics.push_back(rec);
      if (metrics_out) metrics_out << rec.dump() << '\n' << std::flush;
      if (acc > res.best_val) {
        res.best_val = acc;
        res.best_epoch = epoch;
        best_params = model.params().snapshot();
        if (run_dir) detail::write_best_pointer(*run_dir, epoch, acc);
      }
      if (run_dir && tc.save_checkpoints) {
        write_file((*run_dir / "checkpoints" / ("epoch-" + std::to_string(epoch) + ".gtck")).string(),
                   model.save({{"epoch", epoch}, {"val_accuracy", acc}}));
      }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    logging::info("epoch " + std::to_string(epoch) + " loss " + std::to_string(mean_loss) + " (" +
                  std::to_string(secs) + " s)");
  }
  model.params().restore(best_params);
  if (run_dir && !tc.save_checkpoints) write_file((*run_dir / "best.gtck").string(), model.save({{"epoch", res.best_epoch}}));
  return res;
}

/// Frozen sentence and image embeddings of training-language pairs, row-aligned.
template <class T>
struct AnchorCache {
  Tensor<T> text;
  Tensor<T> image;
};

template <class T>
AnchorCache<T> build_anchor_cache(Model<T>& model, const TrainingSet& ts, std::size_t max_anchors, std::uint64_t seed) {
  std::vector<std::size_t> order(ts.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(order.size(), max_anchors));
  std::vector<std::vector<TokenId>> seqs;
  Tensor<T> feats = Tensor<T>::matrix(order.size(), ts.feature_dim);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& r = ts.train[order[i]];
    seqs.push_back(r.tokens);
    const float* x = ts.feature_row(r.image);
    for (std::size_t f = 0; f < ts.feature_dim; ++f) feats(i, f) = static_cast<T>(x[f]);
  }
  return {embed_texts(model, seqs), embed_images(model, feats)};
}

/// Fine-tune the text encoder on captions of a new language. Cached anchors are
/// appended to every batch as constants; the image encoder is frozen.
template <class T>
TrainResult adapt_language(Model<T>& model, const AnchorCache<T>& anchors, const std::vector<TextRecord>& records,
                           const TrainingSet& ts, const TrainConfig& tc, const LossConfig& lc) {
  if (records.empty()) throw DataError("adapt_language: the new-language corpus is empty");
  lc.validate();
  const AdamConfig adam{tc.lr, 0.9, 0.999, 1e-8};
  const Augmenter identity{0.0, 0.0};
  LossConfig text_lc = lc;
  text_lc.use_lv = false;
  const std::size_t na = anchors.text.rows();
  TrainResult res;
  bool first = true;
  for (std::size_t epoch = 1; epoch <= tc.adapt_epochs; ++epoch) {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(tc.seed, 0xADA, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    std::size_t nb = 0;
    for (std::size_t s = 0; s < order.size(); s += tc.batch_size) {
      std::vector<const TextRecord*> recs;
      for (std::size_t i = s; i < std::min(order.size(), s + tc.batch_size); ++i) recs.push_back(&records[order[i]]);
      LossConfig blc = text_lc;
      blc.use_lt = blc.use_lt && na + recs.size() >= 2;
      blc.use_lx = blc.use_lx && na + recs.size() >= 2;
      LossConfig cloze_only = blc;
      cloze_only.use_lt = cloze_only.use_lx = cloze_only.use_lv = false;
      auto batch = build_batch<T>(recs, ts, identity, cloze_only, model.config(), mix_seed(tc.seed, 0xADB00000 + epoch, s));
      model.params().zero_grad();
      double loss_value = 0;
      {
        Graph<T> g(&model.params());
        g.freeze([](const std::string& n) { return Model<T>::is_image_param(n); });
        auto out = model.encode_text(g, batch.text);
        const std::size_t n = recs.size();
        Var<T> img_new = detach(model.encode_image(g, g.constant(batch.features)));
        auto img_all = concat_rows<T>({img_new, g.constant(anchors.image)});
        auto txt_all = concat_rows<T>({out.z, g.constant(anchors.text)});
        std::optional<Var<T>> lt, lx, lcv;
        if (blc.use_lt) {
          const auto& iv = img_all.value();
          const auto cross = similarity_matrix(iv, txt_all.value());
          std::vector<T> diag(n + na);
          for (std::size_t i = 0; i < n + na; ++i) diag[i] = cross(i, i);
          auto alpha = transitive_alpha<T>(diag, similarity_matrix(iv, iv), blc.margin_m);
          for (std::size_t i = n; i < n + na; ++i)
            for (std::size_t j = 0; j < n + na; ++j) alpha(i, j) = T{0};  // anchors contribute no rows
          lt = loss_t(similarity_matrix(txt_all, txt_all), alpha, blc.tau);
        }
        if (blc.use_lx) lx = loss_x(img_all, txt_all, blc.tau);
        if (blc.use_lc) lcv = loss_cloze(model.cloze_logits(g, out.hidden, batch.cloze.rows), batch.cloze.targets);
        LossTerms terms;
        auto loss = total_loss<T>(g, lt, std::nullopt, lx, lcv, blc, &terms);
        loss_value = terms.total;
        if (!std::isfinite(loss_value)) throw NumericError("adapt_language: non-finite loss");
        g.backward(loss);
      }
      model.params().clip_grad_norm(tc.clip_norm);
      adam_step(model.params(), adam);
      if (first) {
        res.initial_loss = loss_value;
        first = false;
      }
      total += loss_value;
      ++nb;
    }
    const double mean = total / static_cast<double>(std::max<std::size_t>(nb, 1));
    if (epoch == 1) res.first_epoch_loss = mean;
    res.last_epoch_loss = mean;
    res.metrics.push_back({{"epoch", epoch}, {"loss", mean}});
  }
  res.best_epoch = tc.adapt_epochs;
  return res;
}

}  // namespace pivot
