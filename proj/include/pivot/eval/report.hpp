#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivot/corpus/io.hpp"
#include "pivot/errors.hpp"

namespace pivot {

using SquareMatrix = std::vector<std::vector<double>>;

/// Protocol result: scalar metrics, an optional language-pair matrix, and run metadata.
struct RetrievalReport {
  std::string protocol;
  std::map<std::string, double> metrics;
  std::vector<std::string> languages;
  SquareMatrix matrix;     // matrix[query language][target language]
  SquareMatrix asymmetry;  // matrix - matrix^T when computed
  nlohmann::json meta = nlohmann::json::object();
};

/// A - A^T. Positive (i, j) means i -> j scores higher than j -> i.
inline SquareMatrix asymmetry_matrix(const SquareMatrix& a) {
  const std::size_t n = a.size();
  for (const auto& row : a)
    if (row.size() != n) throw DataError("asymmetry_matrix: matrix is not square");
  SquareMatrix out(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i][j] = a[i][j] - a[j][i];
  return out;
}

inline nlohmann::json to_json(const RetrievalReport& r) {
  nlohmann::json j = {{"protocol", r.protocol}, {"metrics", r.metrics}, {"languages", r.languages}, {"meta", r.meta}};
  if (!r.matrix.empty()) j["matrix"] = r.matrix;
  if (!r.asymmetry.empty()) j["asymmetry"] = r.asymmetry;
  return j;
}

inline RetrievalReport report_from_json(const nlohmann::json& j) {
  RetrievalReport r;
  try {
    r.protocol = j.at("protocol").get<std::string>();
    r.metrics = j.at("metrics").get<std::map<std::string, double>>();
    r.languages = j.value("languages", std::vector<std::string>{});
    r.matrix = j.value("matrix", SquareMatrix{});
    r.asymmetry = j.value("asymmetry", SquareMatrix{});
    r.meta = j.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  return r;
}

/// FNV-1a 64-bit digest as 16 hex digits.
inline std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string matrix_to_csv(const std::vector<std::string>& labels, const SquareMatrix& m) {
  std::ostringstream out;
  out.precision(17);
  out << "query";
  for (const auto& l : labels) out << ',' << l;
  out << '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    out << (i < labels.size() ? labels[i] : std::to_string(i));
    for (double v : m[i]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

/// Write `<protocol>-<hash>.json` plus one CSV per matrix. Returns the JSON path.
inline std::filesystem::path write_report(const std::filesystem::path& dir, const RetrievalReport& r,
                                          const std::string& checkpoint_hash) {
  std::filesystem::create_directories(dir);
  const std::string stem = r.protocol + "-" + checkpoint_hash;
  const auto path = dir / (stem + ".json");
  io::write_json(path, to_json(r));
  if (!r.matrix.empty()) io::write_text(dir / (stem + ".matrix.csv"), matrix_to_csv(r.languages, r.matrix));
  if (!r.asymmetry.empty()) io::write_text(dir / (stem + ".asymmetry.csv"), matrix_to_csv(r.languages, r.asymmetry));
  return path;
}

}  // namespace pivot
