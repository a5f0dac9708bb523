#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdaie/common.hpp"
#include "sdaie/exif.hpp"
#include "sdaie/image.hpp"

namespace sdaie {

enum class Label { photographic, generated };

inline std::string_view label_name(Label l) { return l == Label::photographic ? "photographic" : "generated"; }

inline Label parse_label(std::string_view s) {
  if (s == "photographic") return Label::photographic;
  if (s == "generated") return Label::generated;
  throw Error("unknown label '" + std::string(s) + "' (expected photographic or generated)");
}

struct ManifestEntry {
  std::string image_path;          // as written in the manifest
  std::filesystem::path resolved;  // relative paths resolve against the manifest's directory
  Label label = Label::photographic;
  std::string source;
  std::optional<ExifRecord> exif;
  std::map<std::string, std::string> raw_exif;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::size_t exif_parse_failures = 0;  // values that degraded to absent

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  const ManifestEntry& operator[](std::size_t i) const { return entries.at(i); }

  std::size_t count(Label l) const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.label == l;
    return n;
  }

  DatasetManifest with_label(Label l) const {
    DatasetManifest out;
    for (const auto& e : entries)
      if (e.label == l) out.entries.push_back(e);
    return out;
  }
};

inline ManifestEntry parse_manifest_line(const std::string& line, const std::filesystem::path& base_dir,
                                         std::size_t* failures = nullptr) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("entry must be a JSON object");
  for (const char* field : {"image_path", "label"})
    if (!j.contains(field) || !j[field].is_string()) throw Error(std::string("missing or non-string field '") + field + "'");
  ManifestEntry e;
  e.image_path = j["image_path"].get<std::string>();
  if (e.image_path.empty()) throw Error("field 'image_path' is empty");
  std::filesystem::path p(e.image_path);
  e.resolved = p.is_absolute() ? p : base_dir / p;
  e.label = parse_label(j["label"].get<std::string>());
  if (j.contains("source") && j["source"].is_string()) e.source = j["source"].get<std::string>();
  if (j.contains("exif") && !j["exif"].is_null()) {
    e.raw_exif = raw_from_json(j["exif"]);
    auto parsed = parse_exif(e.raw_exif);
    if (failures) *failures += parsed.diagnostics.total_failures();
    e.exif = std::move(parsed.record);
  }
  return e;
}

inline DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {}) {
  DatasetManifest m;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto e = parse_manifest_line(line, base_dir, &m.exif_parse_failures);
      if (!seen.insert(e.image_path).second) throw Error("duplicate image_path '" + e.image_path + "'");
      m.entries.push_back(std::move(e));
    } catch (const Error& err) {
      throw Error("manifest line " + std::to_string(lineno) + ": " + err.what());
    }
  }
  return m;
}

/// Reads a JSON-Lines manifest (keys image_path, label, source, exif).
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");
  return parse_manifest(in, path.parent_path());
}

inline nlohmann::json entry_to_json(const ManifestEntry& e) {
  nlohmann::json j{{"image_path", e.image_path}, {"label", label_name(e.label)}, {"source", e.source}};
  if (e.exif) {
    const auto raw = e.raw_exif.empty() ? to_raw(*e.exif) : e.raw_exif;
    j["exif"] = raw;
  } else {
    j["exif"] = nullptr;
  }
  return j;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest '" + path.string() + "'");
  for (const auto& e : m.entries) out << entry_to_json(e).dump() << "\n";
}

/// Entries whose EXIF carries all fourteen tags.
inline DatasetManifest filter_complete(const DatasetManifest& m) {
  DatasetManifest out;
  for (const auto& e : m.entries)
    if (e.exif && e.exif->complete()) out.entries.push_back(e);
  return out;
}

/// `size` distinct indices out of [0, n), uniformly without replacement
/// (partial Fisher-Yates), fully determined by `seed`.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t size, std::uint64_t seed) {
  if (size > n) throw Error("sample: batch size " + std::to_string(size) + " exceeds " + std::to_string(n) + " entries");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < size; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(size);
  return idx;
}

/// Decodes images on first use and keeps them in memory.
class ImageStore {
 public:
  const Image& get(const ManifestEntry& e) { return get(e.resolved); }

  const Image& get(const std::filesystem::path& path) {
    const auto key = path.string();
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    if (!std::filesystem::exists(path)) throw Error("missing image '" + key + "'");
    return cache_.emplace(key, load_image(path)).first->second;
  }

  void put(const std::filesystem::path& path, Image img) { cache_[path.string()] = std::move(img); }
  void clear() { cache_.clear(); }
  std::size_t size() const { return cache_.size(); }

 private:
  std::unordered_map<std::string, Image> cache_;
};

struct Minibatch {
  std::vector<Image> images;
  std::vector<ExifRecord> records;
  std::vector<Label> labels;
  std::vector<std::string> paths;

  std::size_t size() const { return images.size(); }
};

inline Minibatch make_batch(const DatasetManifest& m, const std::vector<std::size_t>& indices, ImageStore& store) {
  Minibatch b;
  for (auto i : indices) {
    const auto& e = m.entries.at(i);
    b.images.push_back(store.get(e));
    b.records.push_back(e.exif.value_or(ExifRecord{}));
    b.labels.push_back(e.label);
    b.paths.push_back(e.image_path);
  }
  return b;
}

inline Minibatch sample_minibatch(const DatasetManifest& m, std::size_t size, std::uint64_t seed, ImageStore& store) {
  return make_batch(m, sample_indices(m.size(), size, seed), store);
}

/// All unordered index pairs (i < j) in lexicographic order.
inline std::vector<std::pair<std::size_t, std::size_t>> enumerate_pairs(std::size_t batch_size) {
  if (batch_size < 2) throw Error("enumerate_pairs: need at least 2 items");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(batch_size * (batch_size - 1) / 2);
  for (std::size_t i = 0; i < batch_size; ++i)
    for (std::size_t j = i + 1; j < batch_size; ++j) pairs.emplace_back(i, j);
  return pairs;
}

}  // namespace sdaie
