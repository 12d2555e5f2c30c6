#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pivot/diffcore/tensor.hpp"
#include "pivot/errors.hpp"
#include "pivot/eval/report.hpp"

namespace pivot {

struct KMeansResult {
  std::vector<std::size_t> assignment;
  std::vector<std::vector<double>> centroids;
  double objective = 0;                 // sum of squared distances to the assigned centroid
  std::vector<double> history;          // objective after each Lloyd step of the kept restart
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

inline KMeansResult lloyd(const Tensor<double>& x, std::size_t k, std::mt19937_64& rng, std::size_t max_iter) {
  const std::size_t n = x.rows(), d = x.cols();
  const double* X = x.data().data();
  KMeansResult r;
  // k-means++ seeding
  std::vector<std::size_t> seeds;
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  seeds.push_back(first(rng));
  std::vector<double> dmin(n, std::numeric_limits<double>::infinity());
  while (seeds.size() < k) {
    const double* c = X + seeds.back() * d;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) total += dmin[i] = std::min(dmin[i], sq_dist(X + i * d, c, d));
    std::size_t pick = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double t = u(rng), acc = 0;
      for (pick = 0; pick + 1 < n; ++pick) {
        acc += dmin[pick];
        if (acc >= t && dmin[pick] > 0) break;
      }
    } else {
      pick = first(rng);
    }
    seeds.push_back(pick);
  }
  r.centroids.resize(k);
  for (std::size_t c = 0; c < k; ++c) r.centroids[c].assign(X + seeds[c] * d, X + seeds[c] * d + d);
  r.assignment.assign(n, 0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = it == 0;
    double obj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = sq_dist(X + i * d, r.centroids[c].data(), d);
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      changed |= best != r.assignment[i];
      r.assignment[i] = best;
      obj += bd;
    }
    r.history.push_back(obj);
    r.objective = obj;
    if (!changed) break;
    std::vector<std::vector<double>> sum(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++cnt[r.assignment[i]];
      for (std::size_t j = 0; j < d; ++j) sum[r.assignment[i]][j] += X[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (cnt[c])
        for (std::size_t j = 0; j < d; ++j) r.centroids[c][j] = sum[c][j] / static_cast<double>(cnt[c]);
  }
  return r;
}

inline double entropy(const std::map<std::size_t, double>& mass) {
  double total = 0, h = 0;
  for (const auto& [k, m] : mass) total += m;
  for (const auto& [k, m] : mass)
    if (m > 0) h -= (m / total) * std::log(m / total);
  return h;
}

}  // namespace detail

/// k-means with k-means++ seeding; the restart with the lowest objective is kept.
inline KMeansResult kmeans(const Tensor<double>& x, std::size_t k, std::size_t restarts = 20, std::uint64_t seed = 0,
                           std::size_t max_iter = 100) {
  if (k < 1) throw UsageError("kmeans: k must be >= 1");
  if (k > x.rows()) throw DataError("kmeans: k = " + std::to_string(k) + " exceeds the " + std::to_string(x.rows()) + " samples");
  std::mt19937_64 rng(seed);
  KMeansResult best;
  best.objective = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(1, restarts); ++r) {
    auto res = detail::lloyd(x, k, rng, max_iter);
    if (res.objective < best.objective) best = std::move(res);
  }
  return best;
}

struct ClusterReport {
  KMeansResult clusters;
  std::vector<double> language_entropy, concept_entropy;  // per cluster, nats
  double mean_language_entropy = 0;                      // size-weighted, normalised by log(#languages)
  double mean_concept_entropy = 0;                       // size-weighted, normalised by log(#concepts)
  double concept_purity = 0;                             // mass of each cluster's majority concept
  std::string driven_by;                                 // "semantics" or "language"
};

/// Cluster the rows and summarise how languages and concepts spread over the clusters.
/// Each row carries a language label and one or more concept labels (mass split evenly).
inline ClusterReport cluster_report(const Tensor<double>& emb, const std::vector<std::size_t>& language,
                                    const std::vector<std::vector<std::size_t>>& concepts, std::size_t k,
                                    std::size_t n_languages, std::size_t n_concepts, std::uint64_t seed = 0,
                                    std::size_t restarts = 20) {
  if (k < 2) throw UsageError("cluster_report: k must be >= 2");
  if (language.size() != emb.rows() || concepts.size() != emb.rows()) throw DataError("cluster_report: label count mismatch");
  ClusterReport rep;
  rep.clusters = kmeans(emb, k, restarts, seed);
  std::vector<std::map<std::size_t, double>> lang_mass(k), concept_mass(k);
  std::vector<double> size(k, 0.0);
  for (std::size_t i = 0; i < emb.rows(); ++i) {
    const auto c = rep.clusters.assignment[i];
    size[c] += 1;
    lang_mass[c][language[i]] += 1;
    for (auto cc : concepts[i]) concept_mass[c][cc] += 1.0 / static_cast<double>(concepts[i].size());
  }
  const double log_l = n_languages > 1 ? std::log(static_cast<double>(n_languages)) : 1.0;
  const double log_c = n_concepts > 1 ? std::log(static_cast<double>(n_concepts)) : 1.0;
  double total = 0, purity = 0;
  for (std::size_t c = 0; c < k; ++c) {
    rep.language_entropy.push_back(detail::entropy(lang_mass[c]));
    rep.concept_entropy.push_back(detail::entropy(concept_mass[c]));
    if (size[c] == 0) continue;
    total += size[c];
    rep.mean_language_entropy += size[c] * rep.language_entropy.back() / log_l;
    rep.mean_concept_entropy += size[c] * rep.concept_entropy.back() / log_c;
    double top = 0;
    for (const auto& [id, m] : concept_mass[c]) top = std::max(top, m);
    purity += top;
  }
  rep.mean_language_entropy /= total;
  rep.mean_concept_entropy /= total;
  rep.concept_purity = purity / total;
  rep.driven_by = rep.mean_concept_entropy < rep.mean_language_entropy ? "semantics" : "language";
  return rep;
}

inline RetrievalReport to_report(const ClusterReport& c) {
  RetrievalReport rep;
  rep.protocol = "cluster";
  rep.metrics = {{"mean_language_entropy", c.mean_language_entropy},
                 {"mean_concept_entropy", c.mean_concept_entropy},
                 {"concept_purity", c.concept_purity},
                 {"objective", c.clusters.objective},
                 {"k", static_cast<double>(c.clusters.centroids.size())}};
  rep.meta = {{"driven_by", c.driven_by}, {"language_entropy", c.language_entropy},
              {"concept_entropy", c.concept_entropy}};
  return rep;
}

}  // namespace pivot
