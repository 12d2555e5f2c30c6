#pragma once

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <pivot/align/align.hpp>

namespace pivot::test_support {

inline Matrix gaussian(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Matrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = z(rng);
  return m;
}

// Haar-distributed rotation via QR with sign correction.
inline Matrix random_orthogonal(std::size_t d, std::mt19937_64& rng) {
  Eigen::HouseholderQR<Matrix> qr(gaussian(d, d, rng));
  Matrix Q = qr.householderQ();
  Matrix R = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < Q.cols(); ++i)
    if (R(i, i) < 0) Q.col(i) *= -1;
  return Q;
}

// Cayley transform of a small skew-symmetric matrix: a rotation close to the identity.
inline Matrix small_rotation(std::size_t d, double size, std::mt19937_64& rng) {
  Matrix A = gaussian(d, d, rng) * size;
  Matrix S = (A - A.transpose()) / 2;
  Matrix I = Matrix::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  return (I - S).inverse() * (I + S);
}

// Word-level tf-idf mutual top-k computed directly on whitespace-split strings.
inline std::set<std::pair<std::string, std::string>> oracle_mine(const std::vector<std::pair<std::string, std::string>>& corpus,
                                                          std::size_t k) {
  auto split = [](const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> w;
    for (std::string t; in >> t;) w.push_back(t);
    return w;
  };
  auto scores = [&](bool forward) {
    std::map<std::string, std::map<std::string, double>> docs;
    for (const auto& [a, b] : corpus) {
      auto from = split(forward ? a : b), to = split(forward ? b : a);
      std::set<std::string> uniq(from.begin(), from.end());
      for (const auto& f : uniq)
        for (const auto& t : to) docs[f][t] += 1;
    }
    std::map<std::string, std::map<std::string, double>> out;
    for (const auto& [f, d] : docs) {
      double total = 0;
      for (const auto& [t, c] : d) total += c;
      for (const auto& [t, c] : d) {
        double df = 0;
        for (const auto& [f2, d2] : docs) df += d2.count(t);
        out[f][t] = c / total * std::log(docs.size() / df);
      }
    }
    return out;
  };
  auto top = [&](const std::map<std::string, double>& row) {
    std::vector<std::pair<std::string, double>> v(row.begin(), row.end());
    std::stable_sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.second > b.second; });
    std::set<std::string> s;
    for (std::size_t i = 0; i < std::min(k, v.size()); ++i) s.insert(v[i].first);
    return s;
  };
  auto ab = scores(true), ba = scores(false);
  std::set<std::pair<std::string, std::string>> out;
  for (const auto& [a, row] : ab)
    for (const auto& b : top(row))
      if (top(ba[b]).count(a)) out.insert({a, b});
  return out;
}

}  // namespace pivot::test_support
