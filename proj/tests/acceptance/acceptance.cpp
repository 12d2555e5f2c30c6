// Acceptance suite: one pass/fail line per criterion, tolerances and budgets pinned below.
// Usage: acceptance [--only C1,C5,...] [--report file] [--work dir] [--strict]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>

#include <pivot/cli/app.hpp>
#include <pivot/pivot.hpp>

#include "support/align_oracles.hpp"
#include "support/finite_diff.hpp"
#include "support/loss_oracles.hpp"

namespace fs = std::filesystem;
using namespace pivot;
using namespace pivot::test_support;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <class... A>
std::string cat(const A&... parts) {
  std::ostringstream o;
  o << std::setprecision(4);
  (o << ... << parts);
  return o.str();
}

std::string pct(double x, int digits = 2) { return cat(std::fixed, std::setprecision(digits), 100.0 * x, "%"); }

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------- tolerances

constexpr double kLossTol = 1e-10;
constexpr double kGradTol = 1e-4;
constexpr double kProcrustesTol = 1e-6;
constexpr double kMultiTol = 1e-5;
constexpr double kOrthoTol = 1e-8;
constexpr std::size_t kSentenceGroups = 200;
constexpr double kSignalFactor = 5.0;
constexpr double kCollapseFactor = 2.0;
constexpr double kMinedConceptShare = 0.90;
constexpr double kPaperChance = 0.0048;

// ---------------------------------------------------------------- helpers

Tensor<double> to_tensor(const Mat& m) {
  std::vector<double> flat;
  for (const auto& r : m) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor<double>({m.size(), m.front().size()}, flat);
}

Mat oracle_beta(const Mat& z) {
  Mat b(z.size(), std::vector<double>(z.size()));
  for (std::size_t i = 0; i < z.size(); ++i)
    for (std::size_t j = 0; j < z.size(); ++j) b[i][j] = oracle_sim(z[i], z[j]);
  return b;
}

// Percentile of a sample (nearest rank on the sorted copy).
double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(v.size() - 1) + 0.5));
  return v[std::min(idx, v.size() - 1)];
}

// ---------------------------------------------------------------- desk worlds

struct Desk {
  World world;
  CorpusBundle bundle;
  Vocabulary vocab;
  TrainingSet ts;
  ModelConfig mc;
  ParaphraseSet test;  // sampled test groups, training languages only
};

WorldSpec desk_spec(std::uint64_t seed) {
  WorldSpec s;  // C=50, L=6, N=5000, F=32, p_noise=0.1
  s.seed = seed;
  return s;
}

std::unique_ptr<Desk> make_desk(const WorldSpec& spec) {
  auto d = std::make_unique<Desk>();
  d->world = generate_world(spec);
  std::vector<std::string> texts;
  for (const auto* ids : {&d->world.splits.train, &d->world.splits.adapt})
    for (const auto& id : *ids) texts.push_back(d->world.data.caption(id).text);
  d->vocab = train_bpe(texts, TokenizerConfig{}.vocab_size);
  d->world.data.tokenize(d->vocab);
  d->bundle = CorpusBundle{d->world.languages, spec.held_out_languages, d->world.data, d->world.splits, d->world.parallel};
  d->ts = make_training_set(d->bundle, d->vocab);
  d->mc.vocab_size = d->vocab.size();
  d->mc.image_feat_dim = d->ts.feature_dim;
  d->mc.seed = spec.seed;
  d->test = sample_groups(make_paraphrase_set(d->bundle.data, d->bundle.splits.test_groups, d->bundle.training_languages()),
                          kSentenceGroups, 0);
  return d;
}

struct Trained {
  std::unique_ptr<Model<float>> model;
  TrainResult result;
  SentenceRetrievalResult test;
  double seconds = 0;
};

Trained train_desk(const Desk& d, const LossConfig& lc, bool supervised, const std::string& label) {
  TrainConfig tc;
  tc.seed = d.world.spec.seed;
  tc.supervised_alpha = supervised;
  tc.save_checkpoints = false;
  progress("training " + label);
  const auto t0 = Clock::now();
  Trained t;
  t.model = std::make_unique<Model<float>>(d.mc);
  t.result = train(*t.model, d.ts, tc, lc);
  t.seconds = since(t0);
  t.test = sentence_retrieval_eval(*t.model, d.test);
  progress(cat(label, ": test accuracy ", pct(t.test.accuracy), " in ", std::fixed, std::setprecision(0), t.seconds, " s"));
  return t;
}

enum class Variant { full, no_lv, no_lx, no_lt, supervised };

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_lv: return "w/o L_v";
    case Variant::no_lx: return "w/o L_x";
    case Variant::no_lt: return "w/o L_t";
    case Variant::supervised: return "supervised alpha";
  }
  return "?";
}

class DeskCache {
 public:
  Desk& desk(std::uint64_t seed) {
    auto& d = desks_[seed];
    if (!d) {
      progress("building desk world seed " + std::to_string(seed));
      d = make_desk(desk_spec(seed));
    }
    return *d;
  }

  Trained& run(std::uint64_t seed, Variant v) {
    auto key = std::make_pair(seed, static_cast<int>(v));
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
    LossConfig lc;
    lc.use_lv = v != Variant::no_lv;
    lc.use_lx = v != Variant::no_lx;
    lc.use_lt = v != Variant::no_lt;
    auto t = train_desk(desk(seed), lc, v == Variant::supervised, cat(variant_name(v), " seed ", seed));
    return runs_.emplace(key, std::move(t)).first->second;
  }

 private:
  std::map<std::uint64_t, std::unique_ptr<Desk>> desks_;
  std::map<std::pair<std::uint64_t, int>, Trained> runs_;
};

const std::vector<std::uint64_t> kSeeds = {0, 1, 2};
constexpr double kSeedBudget = 30 * 60;

// ---------------------------------------------------------------- C1

Outcome c1_loss_oracles() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double tau = LossConfig{}.tau;
  const std::size_t n = 5, D = 6, V = 12;
  double worst[4] = {0, 0, 0, 0};
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_unit_rows(n, D, rng);
    Mat alpha(n, std::vector<double>(n));
    for (auto& r : alpha)
      for (auto& a : r) a = unit(rng);
    const auto views = random_unit_rows(2 * n, D, rng);
    const auto img = random_unit_rows(n, D, rng), txt = random_unit_rows(n, D, rng);
    const auto logits = random_matrix(n, V, -3.0, 3.0, rng);
    std::vector<TokenId> targets(n);
    for (auto& t : targets) t = static_cast<TokenId>(rng() % V);

    Graph<double> g;
    auto zv = g.constant(to_tensor(z));
    const double lt = loss_t(similarity_matrix(zv, zv), to_tensor(alpha), tau).item();
    const double lv = loss_v(g.constant(to_tensor(views)), tau).item();
    const double lx = loss_x(g.constant(to_tensor(img)), g.constant(to_tensor(txt)), tau).item();
    const double lc = loss_cloze(g.constant(to_tensor(logits)), targets).item();
    worst[0] = std::max(worst[0], std::abs(lt - oracle_loss_t(oracle_beta(z), alpha, tau)));
    worst[1] = std::max(worst[1], std::abs(lv - oracle_loss_v(views, tau)));
    worst[2] = std::max(worst[2], std::abs(lx - oracle_loss_x(img, txt, tau)));
    worst[3] = std::max(worst[3], std::abs(lc - oracle_loss_cloze(logits, targets)));
  }
  const bool ok = *std::max_element(worst, worst + 4) <= kLossTol;
  return {ok, cat("max |err| L_t ", worst[0], ", L_v ", worst[1], ", L_x ", worst[2], ", L_c ", worst[3], " (tol ",
                  kLossTol, ", 20 batches of 5)")};
}

// ---------------------------------------------------------------- C2

Outcome c2_gradients() {
  ModelConfig mc;
  mc.layers = 1;
  mc.heads = 2;
  mc.hidden = 8;
  mc.head_dim = 4;
  mc.max_len = 8;
  mc.vocab_size = 16;
  mc.image_feat_dim = 3;
  mc.seed = 5;
  mc.precision = "f64";

  TrainingSet ts;
  ts.feature_dim = 3;
  std::mt19937_64 rng(17);
  std::normal_distribution<float> z;
  for (std::size_t i = 0; i < 4 * 3; ++i) ts.features.push_back(z(rng));
  for (std::size_t i = 0; i < 4; ++i) {
    ts.image_ids.push_back("img" + std::to_string(i));
    std::vector<TokenId> toks = {special::seq};
    for (std::size_t k = 0; k < 3 + i; ++k) toks.push_back(static_cast<TokenId>(special::count + rng() % 12));
    ts.train.push_back(TextRecord{"cap" + std::to_string(i), "l000", toks, i});
  }
  std::vector<const TextRecord*> recs;
  for (const auto& r : ts.train) recs.push_back(&r);

  LossConfig lc;
  lc.cloze_select = 0.5;  // a 4-sentence batch needs a non-empty cloze plan
  auto batch = build_batch<double>(recs, ts, Augmenter{0.1, 0.1}, lc, mc, 11);
  if (batch.cloze.rows.empty()) return {false, "cloze plan is empty"};

  Model<double> model(mc);
  std::string detail;
  bool ok = true;

  // alpha on the tape: every term differentiated end to end
  LossConfig flow = lc;
  flow.alpha_grad_flow = true;
  auto r1 = check_gradients(model.params(), [&](Graph<double>& g) { return batch_objective(g, model, batch, flow); });
  ok &= r1.max_rel_error < kGradTol;
  detail += cat("alpha on tape: max rel err ", r1.max_rel_error, " over ", r1.checked, " params");

  // detached alpha: the objective as a function of parameters with alpha frozen at its current value
  Tensor<double> alpha;
  {
    Graph<double> g(&model.params(), false);
    const auto zt = model.encode_text(g, batch.text).z.value();
    const auto iv = model.encode_image(g, g.constant(batch.features)).value();
    const auto cross = similarity_matrix(iv, zt);
    std::vector<double> diag(recs.size());
    for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = cross(i, i);
    alpha = transitive_alpha<double>(diag, similarity_matrix(iv, iv), lc.margin_m);
  }
  auto r2 = check_gradients(model.params(),
                            [&](Graph<double>& g) { return batch_objective(g, model, batch, lc, nullptr, &alpha); });
  ok &= r2.max_rel_error < kGradTol;

  auto grads = [&](const Tensor<double>* fixed) {
    model.params().zero_grad();
    Graph<double> g(&model.params());
    g.backward(batch_objective(g, model, batch, lc, nullptr, fixed));
    std::vector<double> all;
    for (std::size_t p = 0; p < model.params().size(); ++p) {
      const auto& gr = model.params().at(p).grad();
      all.insert(all.end(), gr.begin(), gr.end());
    }
    return all;
  };
  const auto detached = grads(nullptr), frozen = grads(&alpha);
  double gap = 0;
  for (std::size_t i = 0; i < detached.size(); ++i) gap = std::max(gap, std::abs(detached[i] - frozen[i]));
  ok &= gap <= 1e-12;
  double alpha_mass = 0;
  for (double a : alpha.storage()) alpha_mass += a;
  detail += cat("; detached alpha: max rel err ", r2.max_rel_error, ", matches frozen-alpha gradient to ", gap,
                "; alpha mass ", alpha_mass, " (tol ", kGradTol, ")");
  return {ok, detail};
}

// ---------------------------------------------------------------- C3

Outcome c3_alpha_properties() {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> size(2, 8);
  const double m = 0.4;
  std::size_t asym = 0, out_of_range = 0, leaked = 0, gated = 0, entries = 0;
  double oracle_gap = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = size(rng);
    // image similarities from random unit vectors, rescaled to [0,1]; cross diagonal uniform
    const auto v = random_unit_rows(n, 4, rng);
    Tensor<double> iv = Tensor<double>::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) iv(i, j) = oracle_sim(v[i], v[j]);
    std::vector<double> diag(n);
    for (auto& x : diag) x = trial % 4 == 0 ? 0.3 + 0.2 * unit(rng) : unit(rng);
    const auto a = transitive_alpha<double>(diag, iv, m);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        ++entries;
        asym += a(i, j) != a(j, i);
        out_of_range += !(a(i, j) >= 0.0 && a(i, j) <= 1.0);
        if (i == j) continue;
        const double geo = std::cbrt(diag[i] * iv(i, j) * diag[j]);
        if (geo <= m) {
          ++gated;
          leaked += a(i, j) != 0.0;
        }
        oracle_gap = std::max(oracle_gap, std::abs(a(i, j) - oracle_alpha(diag[i], iv(i, j), diag[j], m)));
      }
    }
  }
  const double f04 = margin_rescale(0.4, m), f1 = margin_rescale(1.0, m), f07 = margin_rescale(0.7, m);
  const bool ok = asym == 0 && out_of_range == 0 && leaked == 0 && gated > 0 && oracle_gap <= 1e-12 && f04 == 0.0 &&
                  f1 == 1.0 && std::abs(f07 - 0.5) <= 1e-15;
  return {ok, cat(entries, " entries: ", asym, " asymmetric, ", out_of_range, " outside [0,1], ", leaked, "/", gated,
                  " sub-margin pairs nonzero; max |alpha - oracle| ", oracle_gap, "; f(0.4)=", f04, " f(1)=", f1,
                  " f(0.7)=", std::setprecision(17), f07)};
}

// ---------------------------------------------------------------- C4

// Top-(M-1) candidate rows per query by scaled cosine, ties to the lower index.
std::vector<std::vector<std::uint32_t>> oracle_top_sets(const Matrix& E, std::size_t k) {
  const auto n = static_cast<std::size_t>(E.rows());
  std::vector<std::vector<std::uint32_t>> top(n);
  const std::size_t block = 256;
  std::vector<std::uint32_t> idx(n);
  for (std::size_t b0 = 0; b0 < n; b0 += block) {
    const auto rows = static_cast<Eigen::Index>(std::min(block, n - b0));
    const Matrix S = E.middleRows(static_cast<Eigen::Index>(b0), rows) * E.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const std::size_t q = b0 + static_cast<std::size_t>(r);
      auto score = [&](std::uint32_t c) { return (S(r, c) + 1.0) / 2.0; };
      idx.clear();
      for (std::uint32_t c = 0; c < n; ++c)
        if (c != q) idx.push_back(c);
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                        [&](std::uint32_t a, std::uint32_t c) { return score(a) > score(c) || (score(a) == score(c) && a < c); });
      top[q].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }
  }
  return top;
}

double accuracy_under_labels(const std::vector<std::vector<std::uint32_t>>& top, const std::vector<std::size_t>& group) {
  double total = 0;
  for (std::size_t q = 0; q < top.size(); ++q) {
    std::size_t hits = 0;
    for (auto c : top[q]) hits += group[c] == group[q];
    total += static_cast<double>(hits) / static_cast<double>(top[q].size());
  }
  return total / static_cast<double>(top.size());
}

Outcome c4_chance_calibration() {
  const std::size_t M = 52, n = kSentenceGroups, vocab = TokenizerConfig{}.vocab_size;
  ModelConfig mc;
  mc.vocab_size = vocab;
  mc.precision = "f64";
  Model<double> model(mc);

  // i.i.d. random-token sentences: no row carries information about its group
  std::mt19937_64 rng(52);
  std::uniform_int_distribution<TokenId> tok(special::count, static_cast<TokenId>(vocab - 1));
  std::uniform_int_distribution<std::size_t> len(3, 12);
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::size_t> group, lang;
  for (std::size_t g = 0; g < n; ++g)
    for (std::size_t l = 0; l < M; ++l) {
      std::vector<TokenId> s = {special::seq};
      for (std::size_t k = len(rng); k > 0; --k) s.push_back(tok(rng));
      seqs.push_back(std::move(s));
      group.push_back(g);
      lang.push_back(l);
    }
  const auto emb = embed_texts(model, seqs);
  const double chance = static_cast<double>(M - 1) / static_cast<double>(n * M - 1);
  double lib_acc = 0, lib_chance = 0;
  {
    const auto r = sentence_retrieval_from_embeddings(emb, group, lang, M);
    lib_acc = r.accuracy;
    lib_chance = r.chance;
  }

  Matrix E(static_cast<Eigen::Index>(emb.rows()), static_cast<Eigen::Index>(emb.cols()));
  for (std::size_t i = 0; i < emb.rows(); ++i)
    for (std::size_t j = 0; j < emb.cols(); ++j) E(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = emb(i, j);
  const auto top = oracle_top_sets(E, M - 1);
  const double oracle_acc = accuracy_under_labels(top, group);

  // null distribution: the same neighbour sets under random relabelling of the rows
  const std::size_t perms = 1000;
  std::vector<double> null;
  std::vector<std::size_t> shuffled = group;
  std::mt19937_64 prng(4);
  for (std::size_t p = 0; p < perms; ++p) {
    std::shuffle(shuffled.begin(), shuffled.end(), prng);
    null.push_back(accuracy_under_labels(top, shuffled));
  }
  const double lo = percentile(null, 0.025), hi = percentile(null, 0.975);
  const double null_mean = std::accumulate(null.begin(), null.end(), 0.0) / static_cast<double>(perms);
  const bool ok = std::abs(lib_acc - oracle_acc) <= 1e-12 && lib_chance == chance && lib_acc >= lo && lib_acc <= hi &&
                  chance >= lo && chance <= hi && std::abs(chance - kPaperChance) < 0.0002;

  // the same measurement on a generated 52-language world, for reference only
  std::string world_note;
  {
    WorldSpec spec;
    spec.languages = M;
    spec.pairs = 2000;
    spec.seed = 52;
    auto d = make_desk(spec);
    ModelConfig wm = d->mc;
    Model<float> untrained(wm);
    const auto r = sentence_retrieval_eval(untrained, d->test);
    world_note = cat("; generated 52-language world, untrained: ", pct(r.accuracy), " over ", r.queries,
                     " queries (info only)");
  }
  return {ok, cat("n=", n, " M=", M, ": accuracy ", pct(lib_acc, 4), " (oracle ", pct(oracle_acc, 4),
                  "), chance (M-1)/(nM-1) = ", pct(chance, 4), " vs reported 0.48%, permutation 95% interval [",
                  pct(lo, 4), ", ", pct(hi, 4), "], null mean ", pct(null_mean, 4), world_note)};
}

// ---------------------------------------------------------------- C5 / C6

Outcome c5_learning_signal(DeskCache& cache) {
  bool ok = true;
  std::string detail;
  for (auto s : kSeeds) {
    auto& t = cache.run(s, Variant::full);
    const double ratio = t.test.accuracy / t.test.chance;
    ok &= ratio >= kSignalFactor && t.seconds < kSeedBudget;
    detail += cat(detail.empty() ? "" : "; ", "seed ", s, ": ", pct(t.test.accuracy), " = ", std::setprecision(3), ratio,
                  "x chance, ", std::fixed, std::setprecision(0), t.seconds, " s");
  }
  const double chance = cache.run(0, Variant::full).test.chance;
  return {ok, cat(detail, " (need >= ", kSignalFactor, "x chance ", pct(chance), ", < ", kSeedBudget, " s per seed)")};
}

Outcome c6_ablations(DeskCache& cache) {
  bool ok = true;
  std::string detail;
  for (auto s : kSeeds) {
    const auto& full = cache.run(s, Variant::full);
    const double chance = full.test.chance;
    std::map<Variant, double> acc;
    double slowest = 0;
    for (auto v : {Variant::no_lv, Variant::no_lx, Variant::no_lt, Variant::supervised}) {
      auto& t = cache.run(s, v);
      acc[v] = t.test.accuracy;
      slowest = std::max(slowest, t.seconds);
    }
    const bool lv = acc[Variant::no_lv] < kCollapseFactor * chance;
    const bool lx = acc[Variant::no_lx] < kCollapseFactor * chance;
    const bool lt = acc[Variant::no_lt] >= kCollapseFactor * chance && acc[Variant::no_lt] < full.test.accuracy;
    const bool sup = acc[Variant::supervised] >= full.test.accuracy;
    ok &= lv && lx && lt && sup && slowest < kSeedBudget;
    auto mark = [](bool b) { return b ? "" : " [x]"; };
    detail += cat(detail.empty() ? "" : "; ", "seed ", s, ": full ", pct(full.test.accuracy), ", w/o L_v ",
                  pct(acc[Variant::no_lv]), mark(lv), ", w/o L_x ", pct(acc[Variant::no_lx]), mark(lx), ", w/o L_t ",
                  pct(acc[Variant::no_lt]), mark(lt), ", supervised ", pct(acc[Variant::supervised]), mark(sup));
  }
  const double chance = cache.run(0, Variant::full).test.chance;
  return {ok, cat(detail, " (2x chance = ", pct(kCollapseFactor * chance), "; [x] marks a missed direction)")};
}

// ---------------------------------------------------------------- C7

Outcome c7_procrustes() {
  std::mt19937_64 rng(7);
  double solve_err = 0, ortho_err = 0, multi_err = 0;
  for (std::size_t d : {8u, 32u}) {
    const Matrix X = gaussian(4 * d, d, rng);
    for (int t = 0; t < 5; ++t) {
      const Matrix R = random_orthogonal(d, rng);
      const auto sol = procrustes_solve(X, X * R);
      solve_err = std::max(solve_err, (sol.W - R).norm());
      ortho_err = std::max(ortho_err, (sol.W.transpose() * sol.W - Matrix::Identity(d, d)).norm());
    }
    const Matrix X0 = gaussian(150, d, rng);
    std::vector<Matrix> sets = {X0, X0 * small_rotation(d, 0.08, rng), X0 * small_rotation(d, 0.08, rng)};
    const auto maps = multi_procrustes(sets, 1, 10, 1e-9);
    const Matrix base = sets[0] * maps.W[0];
    for (std::size_t l = 1; l < sets.size(); ++l) multi_err = std::max(multi_err, (sets[l] * maps.W[l] - base).norm());
    for (const auto& W : maps.W) ortho_err = std::max(ortho_err, (W.transpose() * W - Matrix::Identity(d, d)).norm());
  }
  const bool ok = solve_err <= kProcrustesTol && multi_err <= kMultiTol && ortho_err <= kOrthoTol;
  return {ok, cat("dims {8,32}: ||W-R||_F ", solve_err, " (tol ", kProcrustesTol, "), three rotated copies aligned to ",
                  multi_err, " (tol ", kMultiTol, "), ||W^T W - I||_F ", ortho_err, " (tol ", kOrthoTol, ")")};
}

// ---------------------------------------------------------------- C8

Outcome c8_word_gt(DeskCache& cache) {
  // hand corpus: x<->p, y<->q, z<->r; every token co-occurs with every other one, so idf is 0 and all nine pairs tie
  const std::vector<std::pair<std::string, std::string>> hand = {{"x y", "p q"}, {"x z", "p r"}, {"y z", "q r"}};
  const Vocabulary letters({"p", "q", "r", "x", "y", "z"}, {});
  AlignedSentences aligned;
  for (const auto& [a, b] : hand) aligned.emplace_back(letters.encode(a), letters.encode(b));
  const auto mined_hand = mine_word_gt(aligned, letters, "a", "b", 5);
  std::set<std::pair<std::string, std::string>> got;
  for (const auto& [a, b] : mined_hand.pairs) got.insert({letters.surface(a), letters.surface(b)});
  std::set<std::pair<std::string, std::string>> frozen;
  for (const char* a : {"x", "y", "z"})
    for (const char* b : {"p", "q", "r"}) frozen.insert({a, b});
  const bool hand_ok = got == frozen && got == oracle_mine(hand, 5);

  auto& d = cache.desk(0);
  const auto langs = d.bundle.training_languages();
  std::vector<WordTranslationGT> gts;
  double content = 0, strict = 0, weight = 0;
  for (std::size_t i = 0; i < langs.size(); ++i)
    for (std::size_t j = i + 1; j < langs.size(); ++j) {
      gts.push_back(mine_word_gt(aligned_sentences(d.bundle.data, d.bundle.splits.test_groups, langs[i], langs[j]),
                                 d.vocab, langs[i], langs[j], AlignConfig{}.gt_top));
      const double w = static_cast<double>(gts.back().pairs.size());
      content += w * concept_pair_fraction(gts.back(), d.world.truth, d.vocab);
      strict += w * word_map_agreement(gts.back(), d.world.truth, d.vocab);
      weight += w;
    }
  content /= weight;
  strict /= weight;

  auto& t = cache.run(0, Variant::full);
  std::vector<CaptionRecord> caps;
  for (const auto* ids : {&d.bundle.splits.train, &d.bundle.splits.adapt})
    for (const auto& id : *ids) caps.push_back(d.bundle.data.caption(id));
  const AlignConfig ac;
  const auto ws = word_spaces(*t.model, language_token_sets(caps, d.vocab, ac.min_count));
  const auto maps = align_word_spaces(ws, ac.k, ac.max_rounds, ac.tol);
  const std::string key = "recall_at_" + std::to_string(EvalConfig{}.recall_k);
  const double before = word_retrieval_eval(ws, nullptr, gts, true, EvalConfig{}.recall_k).metrics.at(key);
  const double after = word_retrieval_eval(ws, &maps, gts, true, EvalConfig{}.recall_k).metrics.at(key);

  const bool ok = hand_ok && content >= kMinedConceptShare && after >= before;
  return {ok, cat("hand corpus ", got.size(), " pairs ", hand_ok ? "match" : "DIFFER", "; desk world ",
                  static_cast<std::size_t>(weight), " mined pairs, ", pct(content),
                  " pair concept wordforms (need >= ", pct(kMinedConceptShare), "), ", pct(strict),
                  " are the exact translation; word R@10 ", pct(before), " -> ", pct(after), " after Procrustes")};
}

// ---------------------------------------------------------------- C9

Outcome c9_crossmodal() {
  std::mt19937_64 rng(9);
  const std::size_t n = 100, D = 16, trials = 200;
  auto unit_tensor = [&](std::size_t rows) {
    const auto m = random_unit_rows(rows, D, rng);
    return to_tensor(m);
  };
  const auto t = unit_tensor(n);
  const auto paired = crossmodal_from_embeddings(t, t);
  const bool oracle_ok = paired.text_to_image.r1 == 1.0 && paired.image_to_text.r1 == 1.0;

  bool monotone = true;
  double r1_sum = 0;
  std::size_t oracle_mismatch = 0;
  std::uniform_int_distribution<int> coarse(0, 4);
  for (std::size_t k = 0; k < trials; ++k) {
    const auto r = crossmodal_from_embeddings(unit_tensor(n), unit_tensor(n));
    r1_sum += r.text_to_image.r1 + r.image_to_text.r1;
    for (const auto* x : {&r.text_to_image, &r.image_to_text}) monotone &= x->r1 <= x->r5 && x->r5 <= x->r10;
    // heavily tied scores against a direct rank-count oracle
    Tensor<double> s = Tensor<double>::matrix(20, 20);
    for (auto& v : s.storage()) v = coarse(rng);
    const auto rt = crossmodal_from_scores(s);
    for (const auto* x : {&rt.text_to_image, &rt.image_to_text}) monotone &= x->r1 <= x->r5 && x->r5 <= x->r10;
    double o1 = 0, o5 = 0, o10 = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      std::size_t rank = 0;
      for (std::size_t j = 0; j < 20; ++j) rank += s(i, j) > s(i, i) || (s(i, j) == s(i, i) && j < i);
      o1 += rank < 1;
      o5 += rank < 5;
      o10 += rank < 10;
    }
    oracle_mismatch += std::abs(o1 / 20 - rt.text_to_image.r1) > 1e-15 || std::abs(o5 / 20 - rt.text_to_image.r5) > 1e-15 ||
                       std::abs(o10 / 20 - rt.text_to_image.r10) > 1e-15;
  }
  // each of the 2*trials*n retrievals is a top-1 hit with probability 1/n under the null
  const double events = 2.0 * trials * n;
  const double mean = r1_sum / (2.0 * trials), p = 1.0 / n;
  const double half = 3.0 * std::sqrt(p * (1 - p) / events);
  const bool random_ok = std::abs(mean - p) <= half;
  const bool ok = oracle_ok && random_ok && monotone && oracle_mismatch == 0;
  return {ok, cat("paired R@1 ", pct(paired.text_to_image.r1), " / ", pct(paired.image_to_text.r1), "; random R@1 mean ",
                  pct(mean), " vs 1/n = ", pct(p), " +- ", pct(half), " (3 sd, ", trials, " trials of n=", n,
                  "); recall monotone ", monotone ? "always" : "VIOLATED", "; tied-score oracle mismatches ",
                  oracle_mismatch)};
}

// ---------------------------------------------------------------- C10

Outcome c10_noise_gate(DeskCache& cache) {
  const LossConfig lc;
  auto gate = [&](double p_noise) {
    auto spec = desk_spec(0);
    spec.p_noise = p_noise;
    auto d = make_desk(spec);
    auto t = train_desk(*d, lc, false, cat("full, p_noise ", p_noise));
    return std::make_pair(alpha_gate_report(*t.model, d->ts, d->world.truth, lc.margin_m, 64, 50, 0),
                          d->world.truth.corrupted.size());
  };
  const auto [clean_world, clean_corrupted] = gate(0.0);
  const auto [noisy, noisy_corrupted] = gate(0.5);
  auto& d = cache.desk(0);
  const auto mid = alpha_gate_report(*cache.run(0, Variant::full).model, d.ts, d.world.truth, lc.margin_m, 64, 50, 0);
  const bool ok = noisy.corrupted_pairs > 0 && noisy.clean_pairs > 0 && noisy.gap() > 0;
  return {ok, cat("p_noise 0: ", clean_corrupted, " corrupted captions, clean mean alpha ", clean_world.clean_mean,
                  "; p_noise 0.1: clean ", mid.clean_mean, " vs corrupted ", mid.corrupted_mean, " (gap ", mid.gap(),
                  "); p_noise 0.5: clean ", noisy.clean_mean, " vs corrupted ", noisy.corrupted_mean, " (gap ", noisy.gap(),
                  ", ", noisy.clean_pairs, "/", noisy.corrupted_pairs, " pairs; need gap > 0)")};
}

// ---------------------------------------------------------------- C11

bool same_tree(const fs::path& a, const fs::path& b, std::size_t& files) {
  bool same = true;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto other = b / fs::relative(e.path(), a);
    same &= fs::exists(other) && io::read_text(e.path()) == io::read_text(other);
    ++files;
  }
  return same;
}

Outcome c11_round_trips(DeskCache& cache, const fs::path& work) {
  auto& d = cache.desk(0);
  std::mt19937_64 rng(11);
  const auto& letters = d.vocab.alphabet();
  std::uniform_int_distribution<std::size_t> pick(0, letters.size() - 1), wlen(1, 9), nwords(1, 8);
  std::size_t bpe_fail = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::string s;
    for (std::size_t w = nwords(rng); w > 0; --w) {
      if (!s.empty()) s += ' ';
      for (std::size_t k = wlen(rng); k > 0; --k) s += letters[pick(rng)];
    }
    bpe_fail += d.vocab.decode(d.vocab.encode(s)) != s;
  }
  const bool vocab_json = Vocabulary::from_json(d.vocab.to_json()).to_json().dump() == d.vocab.to_json().dump();

  // corpus: write, reload, write again
  const auto a = work / "corpus-a", b = work / "corpus-b";
  write_world(a, d.world);
  auto back = load_corpus(a);
  World w2;
  update_from_json(w2.spec, io::read_json(a / "world.json").at("spec"));
  w2.languages = back.languages;
  w2.data = back.data;
  w2.splits = back.splits;
  w2.parallel = back.parallel;
  w2.truth = load_ground_truth(a);
  write_world(b, w2);
  std::size_t files = 0;
  const bool corpus_ok = same_tree(a, b, files);

  // checkpoint
  const auto& model = *cache.run(0, Variant::full).model;
  const auto bytes = model.save({{"note", "acceptance"}});
  const bool ckpt_ok = Model<float>::load(bytes).save({{"note", "acceptance"}}) == bytes;

  // report
  auto rep = to_report(cache.run(0, Variant::full).test, d.test.languages);
  const auto path = write_report(work / "report-a", rep, content_hash(bytes));
  const auto again = write_report(work / "report-b", report_from_json(io::read_json(path)), content_hash(bytes));
  std::size_t report_files = 0;
  const bool report_ok = same_tree(work / "report-a", work / "report-b", report_files) && again.filename() == path.filename();

  // same-seed single-threaded 64-bit training reproduces the metric log
  WorldSpec small;
  small.pairs = 400;
  small.languages = 3;
  small.concepts = 12;
  small.feature_dim = 8;
  small.seed = 3;
  auto tiny = make_desk(small);
  ModelConfig mc = tiny->mc;
  mc.layers = 1;
  mc.hidden = 16;
  mc.heads = 2;
  mc.head_dim = 8;
  mc.precision = "f64";
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.val_queries = 20;
  Eigen::setNbThreads(1);
  std::vector<std::string> logs, models;
  for (const char* run : {"seed-a", "seed-b"}) {
    Model<double> m(mc);
    train(m, tiny->ts, tc, LossConfig{}, work / run);
    logs.push_back(io::read_text(work / run / "metrics.jsonl"));
    models.push_back(m.save());
  }
  const bool repro = logs[0] == logs[1] && models[0] == models[1] && !logs[0].empty();

  const bool ok = bpe_fail == 0 && vocab_json && corpus_ok && ckpt_ok && report_ok && repro;
  return {ok, cat("BPE decode(encode(s)) failures ", bpe_fail, "/10000; vocabulary JSON ", vocab_json ? "stable" : "DIFFERS",
                  "; corpus ", files, " files ", corpus_ok ? "identical" : "DIFFER", "; checkpoint ", bytes.size(),
                  " bytes ", ckpt_ok ? "identical" : "DIFFER", "; report ", report_files, " files ",
                  report_ok ? "identical" : "DIFFER", "; same-seed f64 metric logs ", repro ? "identical" : "DIFFER")};
}

// ---------------------------------------------------------------- C12

Outcome c12_probe(DeskCache& cache) {
  auto& d = cache.desk(0);
  const auto langs = d.bundle.training_languages();
  std::map<std::string, std::vector<std::vector<TokenId>>> sentences;
  std::vector<std::vector<std::vector<TokenId>>> by_lang;
  for (const auto& l : langs) {
    auto& v = sentences[l];
    for (const auto& g : d.bundle.splits.test_groups) v.push_back(d.bundle.data.caption(g.captions.at(l)).tokens);
    by_lang.push_back(v);
  }
  // label balance counted directly on the task
  const auto task = make_correspondence_task(by_lang, 0);
  std::vector<std::size_t> pos(langs.size(), 0), tot(langs.size(), 0);
  for (const auto& s : task) {
    pos[s.lang] += s.label == 1;
    ++tot[s.lang];
  }
  bool balanced = true;
  for (std::size_t l = 0; l < langs.size(); ++l) balanced &= pos[l] == tot[l] / 2;

  Model<float> untrained(d.mc);
  const auto r = sentence_correspondence_probe(untrained, langs, sentences, ProbeConfig{});
  auto ci = [](std::size_t n) { return 1.96 * std::sqrt(0.25 / static_cast<double>(n)); };
  const bool seen_ok = std::abs(r.acc_seen - 0.5) <= ci(r.test_seen);
  const bool unseen_ok = std::abs(r.acc_unseen - 0.5) <= ci(r.test_unseen);
  const double rd = relative_decrease(0.75, 0.70);
  const bool ok = balanced && r.label_balance == 0.5 && seen_ok && unseen_ok && std::abs(rd - 0.2) <= 1e-12;
  return {ok, cat("labels ", pct(r.label_balance), " positive (per-language halves ", balanced ? "exact" : "WRONG",
                  "); untrained probe seen ", pct(r.acc_seen), " (n=", r.test_seen, ", 95% CI +-", pct(ci(r.test_seen)),
                  "), unseen ", pct(r.acc_unseen), " (n=", r.test_unseen, ", +-", pct(ci(r.test_unseen)),
                  "); relative_decrease(0.75, 0.70) = ", std::setprecision(17), rd)};
}

// ---------------------------------------------------------------- supplementary

Outcome s_loss_decrease(DeskCache& cache) {
  const auto& r = cache.run(0, Variant::full).result;
  const bool ok = r.last_epoch_loss <= 0.5 * r.initial_loss;
  std::string parts;
  if (!r.metrics.empty())
    for (const char* k : {"l_t", "l_v", "l_x", "l_c"})
      parts += cat(parts.empty() ? "" : ", ", k, " ", std::fixed, std::setprecision(0),
                   r.metrics.front().at(k).get<double>(), " -> ", r.metrics.back().at(k).get<double>());
  return {ok, cat("desk seed 0 full model: initial batch loss ", r.initial_loss, ", first-epoch mean ",
                  r.first_epoch_loss, ", last-epoch mean ", r.last_epoch_loss, " (need last <= 50% of initial); epoch means ",
                  parts)};
}

Outcome s_adaptation() {
  auto spec = desk_spec(0);
  spec.languages = 7;
  spec.held_out_languages = 1;
  auto d = make_desk(spec);
  auto t = train_desk(*d, LossConfig{}, false, "full, 6 of 7 languages");
  const std::string fresh = d->bundle.languages.back();
  auto all = sample_groups(make_paraphrase_set(d->bundle.data, d->bundle.splits.test_groups, d->bundle.languages),
                           kSentenceGroups, 0);
  auto new_language_accuracy = [&](Model<float>& m) {
    const auto r = sentence_retrieval_eval(m, all);
    const std::size_t q = all.languages.size() - 1;
    double s = 0;
    for (std::size_t c = 0; c < all.languages.size(); ++c)
      if (c != q) s += r.pair[q][c];
    return std::make_pair(s / static_cast<double>(all.languages.size() - 1), r.chance);
  };
  const auto before = new_language_accuracy(*t.model);
  std::vector<TextRecord> records;
  for (const auto& r : d->ts.adapt)
    if (r.lang == fresh) records.push_back(r);
  TrainConfig tc;
  progress("adapting to " + fresh);
  const auto anchors = build_anchor_cache(*t.model, d->ts, tc.adapt_anchors, tc.seed);
  adapt_language(*t.model, anchors, records, d->ts, tc, LossConfig{});
  const auto after = new_language_accuracy(*t.model);
  const bool ok = after.first >= kSignalFactor * after.second;
  return {ok, cat("held-out language ", fresh, " (", records.size(), " captions): retrieval ", pct(before.first),
                  " before adaptation, ", pct(after.first), " after; chance ", pct(after.second), " (need >= ",
                  kSignalFactor, "x)")};
}

Outcome s_cli_pipeline(const fs::path& work) {
  const auto root = work / "cli";
  std::ostringstream out, err;
  auto run = [&](std::vector<std::string> args) { return cli::run_cli(args, out, err); };
  const auto t0 = Clock::now();
  int rc = run({"gen-world", "--run-dir", (root / "w").string()});
  if (!rc) rc = run({"train-bpe", "--run-dir", (root / "v").string(), "--world", (root / "w/world").string()});
  if (!rc)
    rc = run({"train", "--run-dir", (root / "t").string(), "--world", (root / "w/world").string(), "--vocab",
              (root / "v/vocab.json").string(), "--train.epochs=2"});
  if (!rc)
    rc = run({"eval-sentence", "--run-dir", (root / "e").string(), "--world", (root / "w/world").string(), "--vocab",
              (root / "v/vocab.json").string(), "--model", (root / "t/model.gtck").string()});
  const double secs = since(t0);
  const bool ok = rc == 0 && secs < 300;
  return {ok, cat("gen-world -> train-bpe -> train (2 epochs) -> eval-sentence: exit ", rc, " in ", std::fixed,
                  std::setprecision(0), secs, " s (budget 300 s)", rc ? " " + err.str() : "")};
}

Outcome s_temperature(DeskCache& cache) {
  auto& d = cache.desk(0);
  LossConfig lc;
  lc.tau = 0.05;
  auto t = train_desk(d, lc, false, "full, tau 0.05");
  const auto& base = cache.run(0, Variant::full);
  return {true, cat("desk seed 0 test accuracy: tau ", LossConfig{}.tau, " -> ", pct(base.test.accuracy), ", tau 0.05 -> ",
                    pct(t.test.accuracy), " (chance ", pct(base.test.chance), ")")};
}

// ---------------------------------------------------------------- driver

struct Criterion {
  std::string id, name;
  double budget;  // seconds, 0 when none
  std::function<Outcome()> run;
  bool informational = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::vector<std::string> only;
  std::string report, work_arg;
  bool strict = false;
  app.add_option("--only", only, "criterion ids to run (default: all)")->delimiter(',');
  app.add_option("--report", report, "also write the result lines to this file");
  app.add_option("--work", work_arg, "scratch directory (default: a fresh temp directory)");
  app.add_flag("--strict", strict, "exit 1 when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  logging::set_level(logging::Level::warn);
  const fs::path work = work_arg.empty() ? fs::temp_directory_path() / ("pivot-acceptance-" + std::to_string(::getpid()))
                                         : fs::path(work_arg);
  fs::remove_all(work);
  fs::create_directories(work);

  DeskCache cache;
  const std::vector<Criterion> criteria = {
      {"C1", "loss oracles", 10, c1_loss_oracles},
      {"C2", "end-to-end gradients", 60, c2_gradients},
      {"C3", "transitive alpha properties", 0, c3_alpha_properties},
      {"C7", "Procrustes recovery", 10, c7_procrustes},
      {"C9", "cross-modal retrieval sanity", 0, c9_crossmodal},
      {"C4", "chance calibration", 0, c4_chance_calibration},
      {"C12", "correspondence probe protocol", 0, [&] { return c12_probe(cache); }},
      {"C5", "end-to-end learning signal", 0, [&] { return c5_learning_signal(cache); }},
      {"C6", "ablation direction", 0, [&] { return c6_ablations(cache); }},
      {"C8", "word ground-truth mining", 0, [&] { return c8_word_gt(cache); }},
      {"C10", "noise gating", 0, [&] { return c10_noise_gate(cache); }},
      {"C11", "BPE and format round trips", 0, [&] { return c11_round_trips(cache, work); }},
      {"S1", "training loss halves (trainer example)", 0, [&] { return s_loss_decrease(cache); }},
      {"S2", "held-out language adaptation (trainer example)", 0, s_adaptation},
      {"S3", "desk CLI pipeline (cli example)", 0, [&] { return s_cli_pipeline(work); }},
      {"S4", "temperature reference", 0, [&] { return s_temperature(cache); }, true},
  };

  std::ofstream file;
  if (!report.empty()) file.open(report);
  std::size_t passed = 0, failed = 0;
  const auto t_all = Clock::now();
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    std::cerr << "running " << c.id << " " << c.name << std::endl;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = since(t0);
    if (c.budget > 0 && secs >= c.budget) o.pass = false;
    const std::string tag = c.informational ? "[INFO]" : (o.pass ? "[PASS]" : "[FAIL]");
    if (!c.informational) ++(o.pass ? passed : failed);
    std::ostringstream line;
    line << tag << " " << c.id << " " << c.name << ": " << o.detail << "; " << std::fixed << std::setprecision(1) << secs
         << " s";
    if (c.budget > 0) line << " (budget " << std::setprecision(0) << c.budget << " s)";
    std::cout << line.str() << std::endl;
    if (file) file << line.str() << '\n' << std::flush;
  }
  std::ostringstream tail;
  tail << "acceptance: " << passed << " passed, " << failed << " failed in " << std::fixed << std::setprecision(0)
       << since(t_all) << " s";
  std::cout << tail.str() << std::endl;
  if (file) file << tail.str() << '\n';
  fs::remove_all(work);
  return strict && failed ? 1 : 0;
}
