#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivot/diffcore/graph.hpp"
#include "pivot/errors.hpp"
#include "pivot/model/model.hpp"
#include "pivot/tokenizer/bpe.hpp"

namespace pivot {

struct LossConfig {
  double lambda_v = 0.2;
  double lambda_x = 0.2;
  double lambda_c = 0.2;
  double tau = 0.1;
  double margin_m = 0.4;
  bool alpha_grad_flow = false;
  bool use_lt = true;
  bool use_lv = true;
  bool use_lx = true;
  bool use_lc = true;
  bool lv_both_orders = true;
  // image-feature augmentation for the two views
  double aug_sigma = 0.1;
  double aug_dropout = 0.1;
  // cloze corruption
  double cloze_select = 0.15;
  double cloze_mask = 0.8;
  double cloze_random = 0.1;

  bool any_enabled() const noexcept { return use_lt || use_lv || use_lx || use_lc; }

  void validate() const {
    if (!(tau > 0)) throw UsageError("losses: tau must be > 0");
    if (!(margin_m >= 0 && margin_m < 1)) throw UsageError("losses: margin_m must lie in [0,1)");
    for (double l : {lambda_v, lambda_x, lambda_c})
      if (!(l >= 0) || !std::isfinite(l)) throw UsageError("losses: lambda weights must be finite and >= 0");
    if (!(cloze_select >= 0 && cloze_select <= 1) || !(cloze_mask >= 0) || !(cloze_random >= 0) ||
        cloze_mask + cloze_random > 1) {
      throw UsageError("losses: invalid cloze probabilities");
    }
    if (!(aug_sigma >= 0) || !(aug_dropout >= 0 && aug_dropout < 1)) throw UsageError("losses: invalid augmentation");
  }
};

inline nlohmann::json to_json(const LossConfig& c) {
  return {{"lambda_v", c.lambda_v},         {"lambda_x", c.lambda_x},
          {"lambda_c", c.lambda_c},         {"tau", c.tau},
          {"margin_m", c.margin_m},         {"alpha_grad_flow", c.alpha_grad_flow},
          {"use_lt", c.use_lt},             {"use_lv", c.use_lv},
          {"use_lx", c.use_lx},             {"use_lc", c.use_lc},
          {"lv_both_orders", c.lv_both_orders}, {"aug_sigma", c.aug_sigma},
          {"aug_dropout", c.aug_dropout},   {"cloze_select", c.cloze_select},
          {"cloze_mask", c.cloze_mask},     {"cloze_random", c.cloze_random}};
}

inline void update_from_json(LossConfig& c, const nlohmann::json& j) {
  for (const auto& [k, v] : j.items()) {
    if (k == "lambda_v") c.lambda_v = v.get<double>();
    else if (k == "lambda_x") c.lambda_x = v.get<double>();
    else if (k == "lambda_c") c.lambda_c = v.get<double>();
    else if (k == "tau") c.tau = v.get<double>();
    else if (k == "margin_m") c.margin_m = v.get<double>();
    else if (k == "alpha_grad_flow") c.alpha_grad_flow = v.get<bool>();
    else if (k == "use_lt") c.use_lt = v.get<bool>();
    else if (k == "use_lv") c.use_lv = v.get<bool>();
    else if (k == "use_lx") c.use_lx = v.get<bool>();
    else if (k == "use_lc") c.use_lc = v.get<bool>();
    else if (k == "lv_both_orders") c.lv_both_orders = v.get<bool>();
    else if (k == "aug_sigma") c.aug_sigma = v.get<double>();
    else if (k == "aug_dropout") c.aug_dropout = v.get<double>();
    else if (k == "cloze_select") c.cloze_select = v.get<double>();
    else if (k == "cloze_mask") c.cloze_mask = v.get<double>();
    else if (k == "cloze_random") c.cloze_random = v.get<double>();
    else throw UsageError("unknown config key 'losses." + k + "'");
  }
}

/// max(0, x - m) / (1 - m)
inline double margin_rescale(double x, double m = 0.4) {
  if (!(m >= 0 && m < 1)) throw std::invalid_argument("margin_rescale: margin must lie in [0,1)");
  return std::max(0.0, x - m) / (1.0 - m);
}

/// Transitive pair weights from the image-caption diagonal scores and the
/// image-image scores. Symmetric by construction with a zero diagonal.
template <class T>
Tensor<T> transitive_alpha(std::span<const T> cross_diag, const Tensor<T>& image_sim, double m = 0.4) {
  const std::size_t n = cross_diag.size();
  if (image_sim.shape() != Shape{n, n}) {
    throw std::invalid_argument("transitive_alpha: image similarities must be " + std::to_string(n) + "x" +
                                std::to_string(n));
  }
  for (T x : cross_diag)
    if (x < T(0)) throw std::invalid_argument("transitive_alpha: negative similarity");
  for (T x : image_sim.data())
    if (x < T(0)) throw std::invalid_argument("transitive_alpha: negative similarity");
  Tensor<T> a = Tensor<T>::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = 0.5 * (static_cast<double>(image_sim(i, j)) + static_cast<double>(image_sim(j, i)));
      const double g = std::cbrt(static_cast<double>(cross_diag[i]) * v * static_cast<double>(cross_diag[j]));
      a(i, j) = a(j, i) = static_cast<T>(margin_rescale(g, m));
    }
  }
  return a;
}

/// Differentiable transitive weights (used when gradients flow through alpha).
/// cross_diag is an n x 1 column; image_sim is n x n.
template <class T>
Var<T> transitive_alpha(const Var<T>& cross_diag, const Var<T>& image_sim, double m = 0.4) {
  const std::size_t n = cross_diag.rows();
  auto chain = mul(matmul(cross_diag, cross_diag, false, true), image_sim);
  auto f = scale(relu(add_scalar(cbrt(chain), static_cast<T>(-m))), static_cast<T>(1.0 / (1.0 - m)));
  Tensor<T> off(Shape{n, n}, T{1});
  for (std::size_t i = 0; i < n; ++i) off(i, i) = T{0};
  return mul(f, cross_diag.graph().constant(std::move(off)));
}

namespace detail {
inline std::vector<std::uint8_t> diagonal_mask(std::size_t n) {
  std::vector<std::uint8_t> m(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1;
  return m;
}

inline void check_tau(double tau) {
  if (!(tau > 0)) throw std::invalid_argument("loss: temperature must be > 0");
}
}  // namespace detail

/// -sum_i sum_{j != i} alpha_ij log softmax_{k != i}(beta_ik / tau)_j, alpha constant.
template <class T>
Var<T> loss_t(const Var<T>& beta, const Tensor<T>& alpha, double tau) {
  detail::check_tau(tau);
  const std::size_t n = beta.rows();
  if (beta.shape() != Shape{n, n} || alpha.shape() != beta.shape()) {
    throw std::invalid_argument("loss_t: beta and alpha must be square and equal in shape");
  }
  Tensor<T> w = alpha;
  for (std::size_t i = 0; i < n; ++i) w(i, i) = T{0};
  auto ls = log_softmax_rows(scale(beta, static_cast<T>(1.0 / tau)), detail::diagonal_mask(n));
  return scale(weighted_sum(ls, std::move(w)), T(-1));
}

/// Same as above with alpha on the tape.
template <class T>
Var<T> loss_t(const Var<T>& beta, const Var<T>& alpha, double tau) {
  detail::check_tau(tau);
  const std::size_t n = beta.rows();
  if (beta.shape() != Shape{n, n} || alpha.shape() != beta.shape()) {
    throw std::invalid_argument("loss_t: beta and alpha must be square and equal in shape");
  }
  auto ls = log_softmax_rows(scale(beta, static_cast<T>(1.0 / tau)), detail::diagonal_mask(n));
  return scale(sum(mul(alpha, ls)), T(-1));
}

/// NT-Xent over 2N unit rows: rows [0, N) are the first views, rows [N, 2N) the second.
template <class T>
Var<T> loss_v(const Var<T>& views, double tau, bool both_orders = true) {
  detail::check_tau(tau);
  const std::size_t two_n = views.rows();
  if (two_n % 2 != 0) throw std::invalid_argument("loss_v: expected an even number of view embeddings");
  const std::size_t n = two_n / 2;
  auto ls = log_softmax_rows(scale(similarity_matrix(views, views), static_cast<T>(1.0 / tau)),
                             detail::diagonal_mask(two_n));
  Tensor<T> w = Tensor<T>::matrix(two_n, two_n);
  for (std::size_t i = 0; i < n; ++i) {
    w(i, i + n) = T{1};
    if (both_orders) w(i + n, i) = T{1};
  }
  return scale(weighted_sum(ls, std::move(w)), T(-1));
}

/// Symmetric image-caption cross-entropy for index-paired rows.
template <class T>
Var<T> loss_x(const Var<T>& images, const Var<T>& texts, double tau) {
  detail::check_tau(tau);
  if (images.rows() != texts.rows()) {
    throw std::invalid_argument("loss_x: " + std::to_string(images.rows()) + " images vs " +
                                std::to_string(texts.rows()) + " texts");
  }
  const std::size_t n = images.rows();
  auto s = scale(similarity_matrix(images, texts), static_cast<T>(1.0 / tau));
  Tensor<T> eye = Tensor<T>::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) eye(i, i) = T{1};
  auto a = weighted_sum(log_softmax_rows(s), eye);
  auto b = weighted_sum(log_softmax_rows(transpose(s)), std::move(eye));
  return scale(add(a, b), T(-1));
}

/// Cross-entropy of vocabulary logits (one row per corrupted position) against the original ids.
template <class T>
Var<T> loss_cloze(const Var<T>& logits, const std::vector<TokenId>& targets) {
  if (logits.rows() != targets.size()) throw std::invalid_argument("loss_cloze: one target per logit row required");
  if (targets.empty()) return logits.graph().constant(Tensor<T>::scalar(T{0}));
  Tensor<T> w = Tensor<T>::matrix(targets.size(), logits.cols());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= logits.cols()) throw std::invalid_argument("loss_cloze: target id out of range");
    w(r, targets[r]) = T{1};
  }
  return scale(weighted_sum(log_softmax_rows(logits), std::move(w)), T(-1));
}

/// Positions chosen for the cloze objective and their original ids.
struct ClozePlan {
  std::vector<std::size_t> rows;  // flat row index b*seq_len+t
  std::vector<TokenId> targets;
};

/// Corrupt a batch in place: each non-[SEQ] token is selected with probability
/// `select`; a selected token becomes [MASK], a random ordinary token, or stays.
inline ClozePlan make_cloze_plan(TextBatch& b, std::size_t vocab_size, std::mt19937_64& rng, double select = 0.15,
                                 double mask = 0.8, double random = 0.1) {
  ClozePlan plan;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool can_randomize = vocab_size > special::count;
  std::uniform_int_distribution<std::size_t> tok(special::count, can_randomize ? vocab_size - 1 : special::count);
  for (std::size_t i = 0; i < b.batch; ++i) {
    for (std::size_t t = 1; t < b.seq_len; ++t) {
      const std::size_t r = i * b.seq_len + t;
      if (!b.valid[r] || Vocabulary::is_special(static_cast<TokenId>(b.ids[r]))) continue;
      if (u(rng) >= select) continue;
      plan.rows.push_back(r);
      plan.targets.push_back(static_cast<TokenId>(b.ids[r]));
      const double p = u(rng);
      if (p < mask) b.ids[r] = special::mask;
      else if (p < mask + random && can_randomize) b.ids[r] = tok(rng);
    }
  }
  return plan;
}

struct LossTerms {
  double lt = 0, lv = 0, lx = 0, lc = 0, total = 0;
};

/// Weighted sum of the components. A non-finite component is an error naming it.
inline double total_loss(double lt, double lv, double lx, double lc, double l1 = 0.2, double l2 = 0.2,
                         double l3 = 0.2) {
  const std::pair<const char*, double> parts[] = {{"L_t", lt}, {"L_v", lv}, {"L_x", lx}, {"L_c", lc}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NumericError(std::string("total_loss: component ") + name + " is not finite");
  return lt + l1 * lv + l2 * lx + l3 * lc;
}

/// Weighted sum of the enabled (present) components.
template <class T>
Var<T> total_loss(Graph<T>& g, const std::optional<Var<T>>& lt, const std::optional<Var<T>>& lv,
                  const std::optional<Var<T>>& lx, const std::optional<Var<T>>& lc, const LossConfig& cfg,
                  LossTerms* terms = nullptr) {
  LossTerms t;
  const std::pair<const char*, const std::optional<Var<T>>*> parts[] = {
      {"L_t", &lt}, {"L_v", &lv}, {"L_x", &lx}, {"L_c", &lc}};
  for (const auto& [name, v] : parts)
    if (*v && !std::isfinite(static_cast<double>((**v).item())))
      throw NumericError(std::string("total_loss: component ") + name + " is not finite");
  Var<T> out = g.constant(Tensor<T>::scalar(T{0}));
  if (lt) {
    out = add(out, *lt);
    t.lt = static_cast<double>(lt->item());
  }
  if (lv) {
    out = add(out, scale(*lv, static_cast<T>(cfg.lambda_v)));
    t.lv = static_cast<double>(lv->item());
  }
  if (lx) {
    out = add(out, scale(*lx, static_cast<T>(cfg.lambda_x)));
    t.lx = static_cast<double>(lx->item());
  }
  if (lc) {
    out = add(out, scale(*lc, static_cast<T>(cfg.lambda_c)));
    t.lc = static_cast<double>(lc->item());
  }
  t.total = static_cast<double>(out.item());
  if (terms) *terms = t;
  return out;
}

}  // namespace pivot
