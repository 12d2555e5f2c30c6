#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivot/corpus/records.hpp"
#include "pivot/corpus/world.hpp"
#include "pivot/errors.hpp"

namespace pivot {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace io {

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << s;
  if (!out) throw DataError("write failed for '" + p.string() + "'");
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  try {
    return nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("'" + p.string() + "': " + e.what());
  }
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

}  // namespace io

// ---- captions (JSONL) ----

inline std::string captions_to_jsonl(const std::vector<CaptionRecord>& caps) {
  std::string out;
  for (const auto& c : caps) {
    nlohmann::json j = {{"id", c.id}, {"lang", c.lang}, {"text", c.text}, {"image_id", c.image_id}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// Parse caption JSONL. Blank lines are skipped; every malformed line is listed in one error.
inline std::vector<CaptionRecord> captions_from_jsonl(const std::string& text, const std::string& source = "captions") {
  std::vector<CaptionRecord> out;
  std::vector<std::string> errors;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("lang").get<std::string>(), j.at("text").get<std::string>(),
                     j.at("image_id").get<std::string>(), {}});
    } catch (const nlohmann::json::exception& e) {
      errors.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = source + ": " + std::to_string(errors.size()) + " malformed line(s)";
    for (const auto& e : errors) msg += "; " + e;
    throw DataError(msg);
  }
  return out;
}

inline std::string parallel_to_jsonl(const std::vector<ParallelCaption>& pcs) {
  std::string out;
  for (const auto& p : pcs) {
    const auto& c = p.caption;
    nlohmann::json j = {{"id", c.id}, {"lang", c.lang}, {"text", c.text}, {"image_id", c.image_id},
                        {"source_id", p.source_id}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<ParallelCaption> parallel_from_jsonl(const std::string& text) {
  auto caps = captions_from_jsonl(text, "parallel");
  std::vector<ParallelCaption> out;
  std::istringstream in(text);
  std::string line;
  std::size_t k = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back({nlohmann::json::parse(line).at("source_id").get<std::string>(), caps.at(k++)});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("parallel: ") + e.what());
    }
  }
  return out;
}

// ---- image features (GTRF) ----

inline constexpr char kFeatureMagic[4] = {'G', 'T', 'R', 'F'};

inline std::string features_to_bytes(const std::vector<ImageRecord>& images) {
  const std::uint64_t n = images.size();
  const std::uint64_t f = images.empty() ? 0 : images.front().features.size();
  std::string out(kFeatureMagic, 4);
  auto put = [&](const auto& v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); };
  put(std::uint32_t{1});
  put(std::uint32_t{0});
  put(std::uint32_t{2});
  put(n);
  put(f);
  for (const auto& im : images) {
    if (im.features.size() != f) throw DataError("image '" + im.id + "' has a feature length mismatch");
    out.append(reinterpret_cast<const char*>(im.features.data()), f * sizeof(float));
  }
  return out;
}

inline nlohmann::json feature_index(const std::vector<ImageRecord>& images) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < images.size(); ++i) j[images[i].id] = i;
  return j;
}

/// Decode a GTRF payload plus its image_id -> row index.
inline std::vector<ImageRecord> features_from_bytes(const std::string& bytes, const nlohmann::json& index) {
  constexpr std::size_t header = 4 + 3 * 4 + 2 * 8;
  if (bytes.size() < header || std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
    throw DataError("features: bad magic or truncated header");
  }
  auto get = [&](std::size_t off, auto v) {
    std::memcpy(&v, bytes.data() + off, sizeof v);
    return v;
  };
  if (get(4, std::uint32_t{}) != 1) throw DataError("features: unsupported version");
  if (get(8, std::uint32_t{}) != 0) throw DataError("features: unsupported dtype");
  if (get(12, std::uint32_t{}) != 2) throw DataError("features: expected a 2-d array");
  const auto n = get(16, std::uint64_t{});
  const auto f = get(24, std::uint64_t{});
  if (bytes.size() != header + n * f * sizeof(float)) throw DataError("features: payload size does not match dims");
  std::vector<ImageRecord> out(n);
  std::vector<bool> seen(n, false);
  try {
    for (const auto& [id, row_j] : index.items()) {
      const auto row = row_j.get<std::size_t>();
      if (row >= n || seen[row]) throw DataError("features: index row for '" + id + "' is invalid");
      seen[row] = true;
      out[row].id = id;
      out[row].features.resize(f);
      std::memcpy(out[row].features.data(), bytes.data() + header + row * f * sizeof(float), f * sizeof(float));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("features index: ") + e.what());
  }
  for (std::size_t r = 0; r < n; ++r)
    if (!seen[r]) throw DataError("features: row " + std::to_string(r) + " has no image id");
  for (const auto& im : out)
    for (float v : im.features)
      if (!std::isfinite(v)) throw DataError("features: non-finite value for image '" + im.id + "'");
  return out;
}

inline std::filesystem::path feature_index_path(const std::filesystem::path& features) {
  return features.string() + ".index.json";
}

inline void write_features(const std::filesystem::path& p, const std::vector<ImageRecord>& images) {
  io::write_text(p, features_to_bytes(images));
  io::write_json(feature_index_path(p), feature_index(images));
}

/// Load an external caption file and feature file (with sidecar index).
inline Dataset load_external(const std::filesystem::path& corpus_path, const std::filesystem::path& features_path) {
  auto caps = captions_from_jsonl(io::read_text(corpus_path), corpus_path.string());
  auto imgs = features_from_bytes(io::read_text(features_path), io::read_json(feature_index_path(features_path)));
  Dataset d(std::move(caps), std::move(imgs));
  d.check_references();
  return d;
}

// ---- world directories ----

namespace world_files {
inline constexpr const char* spec = "world.json";
inline constexpr const char* captions = "captions.jsonl";
inline constexpr const char* features = "features.gtrf";
inline constexpr const char* splits = "splits.json";
inline constexpr const char* parallel = "parallel.jsonl";
inline constexpr const char* truth = "ground_truth.json";
}  // namespace world_files

/// Write a world. The ground truth goes to its own file.
inline void write_world(const std::filesystem::path& dir, const World& w) {
  std::filesystem::create_directories(dir);
  nlohmann::json spec = to_json(w.spec);
  io::write_json(dir / world_files::spec, {{"spec", spec}, {"languages", w.languages}});
  io::write_text(dir / world_files::captions, captions_to_jsonl(w.data.captions()));
  write_features(dir / world_files::features, w.data.images());
  io::write_json(dir / world_files::splits, to_json(w.splits));
  io::write_text(dir / world_files::parallel, parallel_to_jsonl(w.parallel));
  io::write_json(dir / world_files::truth, to_json(w.truth));
}

/// Model-visible part of a world directory: no ground truth.
struct CorpusBundle {
  std::vector<std::string> languages;
  std::size_t held_out_languages = 0;
  Dataset data;
  SplitManifest splits;
  std::vector<ParallelCaption> parallel;

  std::vector<std::string> training_languages() const {
    return {languages.begin(), languages.end() - static_cast<std::ptrdiff_t>(held_out_languages)};
  }
};

inline CorpusBundle load_corpus(const std::filesystem::path& dir) {
  CorpusBundle b;
  auto meta = io::read_json(dir / world_files::spec);
  try {
    b.languages = meta.at("languages").get<std::vector<std::string>>();
    b.held_out_languages = meta.at("spec").value("held_out_languages", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("world.json: ") + e.what());
  }
  b.data = load_external(dir / world_files::captions, dir / world_files::features);
  b.splits = manifest_from_json(io::read_json(dir / world_files::splits));
  if (std::filesystem::exists(dir / world_files::parallel)) {
    b.parallel = parallel_from_jsonl(io::read_text(dir / world_files::parallel));
    for (const auto& p : b.parallel) {
      b.data.caption(p.source_id);
      if (!b.data.has_image(p.caption.image_id)) throw DataError("parallel: unknown image '" + p.caption.image_id + "'");
    }
  }
  return b;
}

inline GroundTruth load_ground_truth(const std::filesystem::path& dir) {
  return ground_truth_from_json(io::read_json(dir / world_files::truth));
}

}  // namespace pivot
