#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdaie/common.hpp"

namespace sdaie {

enum class TagKind { categorical, ordinal, continuous };

enum class Unit { none, seconds, millimeters, fstop, ev, iso };

struct TagInfo {
  std::string_view name;
  TagKind kind;
  Unit unit;
};

inline constexpr std::size_t kNumTags = 14;
inline constexpr std::size_t kNumCategorical = 7;
inline constexpr std::size_t kNumNumeric = 7;

// Order is fixed: categorical tags first, then ordinal, then continuous.
inline constexpr std::array<TagInfo, kNumTags> kTags{{
    {"Flash", TagKind::categorical, Unit::none},
    {"Make", TagKind::categorical, Unit::none},
    {"MeteringMode", TagKind::categorical, Unit::none},
    {"Model", TagKind::categorical, Unit::none},
    {"SceneCaptureType", TagKind::categorical, Unit::none},
    {"ExposureMode", TagKind::categorical, Unit::none},
    {"WhiteBalanceMode", TagKind::categorical, Unit::none},
    {"ExposureBiasValue", TagKind::ordinal, Unit::ev},
    {"ISOSpeedRatings", TagKind::ordinal, Unit::iso},
    {"ApertureValue", TagKind::continuous, Unit::fstop},
    {"ExposureTime", TagKind::continuous, Unit::seconds},
    {"F-Number", TagKind::continuous, Unit::fstop},
    {"FocalLength", TagKind::continuous, Unit::millimeters},
    {"ShutterSpeedValue", TagKind::continuous, Unit::seconds},
}};

inline std::string_view kind_name(TagKind k) {
  switch (k) {
    case TagKind::categorical: return "categorical";
    case TagKind::ordinal: return "ordinal";
    case TagKind::continuous: return "continuous";
  }
  return "?";
}

inline TagKind parse_kind(std::string_view s) {
  if (s == "categorical") return TagKind::categorical;
  if (s == "ordinal") return TagKind::ordinal;
  if (s == "continuous") return TagKind::continuous;
  throw Error("unknown tag kind '" + std::string(s) + "'");
}

inline bool is_numeric(TagKind k) { return k != TagKind::categorical; }

/// Canonical tag index for a raw key. Accepts the canonical names plus the
/// spellings emitted by common EXIF dumpers (FNumber, ISO, WhiteBalance).
inline std::optional<std::size_t> tag_index(std::string_view key) {
  for (std::size_t i = 0; i < kNumTags; ++i)
    if (kTags[i].name == key) return i;
  static const std::unordered_map<std::string_view, std::string_view> aliases{
      {"FNumber", "F-Number"},
      {"ISO", "ISOSpeedRatings"},
      {"ISOSpeed", "ISOSpeedRatings"},
      {"PhotographicSensitivity", "ISOSpeedRatings"},
      {"WhiteBalance", "WhiteBalanceMode"},
      {"ExposureCompensation", "ExposureBiasValue"},
  };
  if (auto it = aliases.find(key); it != aliases.end()) return tag_index(it->second);
  return std::nullopt;
}

inline std::size_t require_tag(std::string_view name) {
  auto idx = tag_index(name);
  if (!idx) throw Error("unknown EXIF tag '" + std::string(name) + "'");
  return *idx;
}

struct NumericValue {
  double value = 0.0;
  Unit unit = Unit::none;
  bool operator==(const NumericValue&) const = default;
};

using ParsedValue = std::variant<std::monostate, std::string, NumericValue>;

struct ExifRecord {
  std::array<ParsedValue, kNumTags> values{};

  bool has(std::size_t tag) const { return !std::holds_alternative<std::monostate>(values.at(tag)); }
  bool has(std::string_view name) const { return has(require_tag(name)); }

  const std::string& categorical(std::size_t tag) const {
    if (const auto* s = std::get_if<std::string>(&values.at(tag))) return *s;
    throw Error("tag '" + std::string(kTags[tag].name) + "' is absent or not categorical");
  }
  double numeric(std::size_t tag) const {
    if (const auto* n = std::get_if<NumericValue>(&values.at(tag))) return n->value;
    throw Error("tag '" + std::string(kTags[tag].name) + "' is absent or not numeric");
  }

  std::size_t present_count() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](const ParsedValue& v) {
      return !std::holds_alternative<std::monostate>(v);
    }));
  }
  bool complete() const { return present_count() == kNumTags; }

  bool operator==(const ExifRecord&) const = default;
};

struct ParseDiagnostics {
  std::size_t unknown_keys = 0;
  std::array<std::size_t, kNumTags> failures{};

  std::size_t total_failures() const {
    std::size_t n = 0;
    for (auto f : failures) n += f;
    return n;
  }
};

struct ParseResult {
  ExifRecord record;
  ParseDiagnostics diagnostics;
};

namespace detail {

inline std::string normalize_categorical(std::string_view in) {
  std::string out;
  out.reserve(in.size());
  bool pending_space = false;
  for (char c : in) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

inline std::string trim_lower(std::string_view in) { return normalize_categorical(in); }

struct NumberToken {
  double value;
  std::string prefix;
  std::string suffix;
};

// Splits "<prefix> <number>[/<number>] <suffix>" into parts. A fraction is
// evaluated from its two components in one division.
inline std::optional<NumberToken> split_number(const std::string& text) {
  static const std::regex re(
      R"(^(.*?)([+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)(?:\s*/\s*((?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?))?(.*)$)");
  std::smatch m;
  if (!std::regex_match(text, m, re)) return std::nullopt;
  const auto to_double = [](const std::string& t) -> std::optional<double> {
    try {
      return std::stod(t);
    } catch (const std::out_of_range&) {
      return std::nullopt;
    }
  };
  auto num = to_double(m[2].str());
  if (!num) return std::nullopt;
  if (m[3].matched) {
    const auto den = to_double(m[3].str());
    if (!den || *den == 0.0) return std::nullopt;
    *num /= *den;
  }
  if (!std::isfinite(*num)) return std::nullopt;
  auto strip = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return std::string{};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  };
  return NumberToken{*num, strip(m[1].str()), strip(m[4].str())};
}

inline bool one_of(const std::string& s, std::initializer_list<std::string_view> options) {
  return std::any_of(options.begin(), options.end(), [&](std::string_view o) { return s == o; });
}

inline std::optional<NumericValue> parse_numeric(std::size_t tag, std::string_view raw) {
  std::string text = trim_lower(raw);
  const std::string_view name = kTags[tag].name;
  const Unit unit = kTags[tag].unit;
  if (unit == Unit::millimeters) {
    // "24.0 mm (35 mm equivalent: 38.0 mm)"
    if (auto p = text.find('('); p != std::string::npos) text = trim_lower(text.substr(0, p));
  }
  bool apex = false;
  if (text.starts_with("apex")) {
    apex = true;
    text = trim_lower(text.substr(4));
    if (text.starts_with(":")) text = trim_lower(text.substr(1));
  }
  auto tok = split_number(text);
  if (!tok) return std::nullopt;
  if (tok->suffix == "apex") {
    apex = true;
    tok->suffix.clear();
  }
  double v = tok->value;
  switch (unit) {
    case Unit::seconds:
      if (!tok->prefix.empty() || !one_of(tok->suffix, {"", "s", "sec", "secs", "second", "seconds"})) return std::nullopt;
      if (apex) {
        if (name != "ShutterSpeedValue" || !tok->suffix.empty()) return std::nullopt;
        v = std::exp2(-v);
      }
      if (!(v > 0.0)) return std::nullopt;
      break;
    case Unit::fstop:
      if (!one_of(tok->prefix, {"", "f", "f/"}) || !tok->suffix.empty()) return std::nullopt;
      if (apex) {
        if (name != "ApertureValue" || !tok->prefix.empty()) return std::nullopt;
        v = std::exp2(v / 2.0);
      }
      if (!(v > 0.0)) return std::nullopt;
      break;
    case Unit::millimeters:
      if (apex || !tok->prefix.empty() || !one_of(tok->suffix, {"", "mm"})) return std::nullopt;
      if (!(v > 0.0)) return std::nullopt;
      break;
    case Unit::ev:
      if (apex || !tok->prefix.empty() || !one_of(tok->suffix, {"", "ev"})) return std::nullopt;
      break;
    case Unit::iso:
      if (apex || !one_of(tok->prefix, {"", "iso"}) || !tok->suffix.empty()) return std::nullopt;
      if (!(v > 0.0)) return std::nullopt;
      break;
    case Unit::none:
      return std::nullopt;
  }
  if (!std::isfinite(v)) return std::nullopt;
  return NumericValue{v, unit};
}

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Parses a raw EXIF key/value map. Unknown keys are ignored and unparseable
/// values become absent; both are tallied in the diagnostics.
inline ParseResult parse_exif(const std::map<std::string, std::string>& raw) {
  ParseResult out;
  for (const auto& [key, value] : raw) {
    const auto idx = tag_index(key);
    if (!idx) {
      ++out.diagnostics.unknown_keys;
      continue;
    }
    ParsedValue parsed;
    if (kTags[*idx].kind == TagKind::categorical) {
      auto s = detail::normalize_categorical(value);
      if (!s.empty()) parsed = std::move(s);
    } else if (auto n = detail::parse_numeric(*idx, value)) {
      parsed = *n;
    }
    if (std::holds_alternative<std::monostate>(parsed)) {
      ++out.diagnostics.failures[*idx];
    } else {
      out.record.values[*idx] = std::move(parsed);
    }
  }
  return out;
}

/// Normalized textual form of a record; parse_exif(to_raw(r)).record == r.
inline std::map<std::string, std::string> to_raw(const ExifRecord& record) {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < kNumTags; ++i) {
    const auto& v = record.values[i];
    if (const auto* s = std::get_if<std::string>(&v)) {
      out[std::string(kTags[i].name)] = *s;
    } else if (const auto* n = std::get_if<NumericValue>(&v)) {
      const std::string num = detail::format_real(n->value);
      std::string text;
      switch (n->unit) {
        case Unit::seconds: text = num + " s"; break;
        case Unit::millimeters: text = num + " mm"; break;
        case Unit::fstop: text = "F" + num; break;
        case Unit::ev: text = num + " EV"; break;
        case Unit::iso:
        case Unit::none: text = num; break;
      }
      out[std::string(kTags[i].name)] = text;
    }
  }
  return out;
}

inline std::map<std::string, std::string> raw_from_json(const nlohmann::json& j) {
  std::map<std::string, std::string> raw;
  if (j.is_null()) return raw;
  if (!j.is_object()) throw Error("EXIF map must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (v.is_string())
      raw[k] = v.get<std::string>();
    else if (v.is_number())
      raw[k] = v.dump();
    else if (!v.is_null())
      raw[k] = v.dump();
  }
  return raw;
}

inline const std::string kOthers = "others";

/// Top-`top_c` most frequent values of a categorical tag (ties broken
/// lexicographically) followed by the "others" bucket.
inline std::vector<std::string> build_vocab(const std::vector<ExifRecord>& records, std::size_t tag,
                                            std::size_t top_c) {
  if (kTags.at(tag).kind != TagKind::categorical)
    throw Error("build_vocab: tag '" + std::string(kTags[tag].name) + "' is not categorical");
  if (top_c < 1) throw Error("build_vocab: top_c must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records)
    if (r.has(tag)) ++counts[r.categorical(tag)];
  if (counts.empty()) throw Error("build_vocab: no record has tag '" + std::string(kTags[tag].name) + "'");
  counts.erase(kOthers);
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> vocab;
  for (std::size_t i = 0; i < ranked.size() && i < top_c; ++i) vocab.push_back(ranked[i].first);
  vocab.push_back(kOthers);
  return vocab;
}

inline std::vector<std::string> build_vocab(const std::vector<ExifRecord>& records, std::string_view tag,
                                            std::size_t top_c) {
  return build_vocab(records, require_tag(tag), top_c);
}

struct TagEntry {
  std::string name;
  TagKind kind = TagKind::categorical;
  std::vector<std::string> vocabulary;  // categorical only
  double weight = 1.0;                  // alpha_i or beta_i
};

struct TagSchema {
  static constexpr int kVersion = 1;
  std::array<TagEntry, kNumTags> entries;

  std::size_t classes(std::size_t tag) const { return entries.at(tag).vocabulary.size(); }

  void validate() const {
    std::size_t cat = 0, ord = 0, cont = 0;
    for (std::size_t i = 0; i < kNumTags; ++i) {
      const auto& e = entries[i];
      if (e.name != kTags[i].name || e.kind != kTags[i].kind)
        throw Error("schema entry " + std::to_string(i) + " does not match tag '" + std::string(kTags[i].name) + "'");
      if (!(e.weight > 0.0) || !std::isfinite(e.weight)) throw Error("schema weight for '" + e.name + "' is invalid");
      switch (e.kind) {
        case TagKind::categorical: {
          ++cat;
          if (e.vocabulary.empty() || e.vocabulary.back() != kOthers ||
              std::count(e.vocabulary.begin(), e.vocabulary.end(), kOthers) != 1)
            throw Error("vocabulary for '" + e.name + "' must end with a single 'others'");
          break;
        }
        case TagKind::ordinal: ++ord; break;
        case TagKind::continuous: ++cont; break;
      }
    }
    if (cat != 7 || ord != 2 || cont != 5) throw Error("schema must hold 7 categorical, 2 ordinal, 5 continuous tags");
  }

  static TagSchema build(const std::vector<ExifRecord>& records, std::size_t top_c = 30) {
    TagSchema s;
    for (std::size_t i = 0; i < kNumTags; ++i) {
      s.entries[i].name = std::string(kTags[i].name);
      s.entries[i].kind = kTags[i].kind;
      if (kTags[i].kind == TagKind::categorical) s.entries[i].vocabulary = build_vocab(records, i, top_c);
    }
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json tags = nlohmann::json::array();
    for (const auto& e : entries) {
      nlohmann::json t{{"name", e.name}, {"kind", kind_name(e.kind)}, {"weight", e.weight}};
      if (e.kind == TagKind::categorical) t["vocabulary"] = e.vocabulary;
      tags.push_back(std::move(t));
    }
    return {{"version", kVersion}, {"tags", std::move(tags)}};
  }

  static TagSchema from_json(const nlohmann::json& j) {
    if (j.at("version").get<int>() != kVersion) throw Error("unsupported tag schema version");
    const auto& tags = j.at("tags");
    if (!tags.is_array() || tags.size() != kNumTags) throw Error("tag schema must list 14 tags");
    TagSchema s;
    for (std::size_t i = 0; i < kNumTags; ++i) {
      const auto& t = tags[i];
      auto& e = s.entries[i];
      e.name = t.at("name").get<std::string>();
      e.kind = parse_kind(t.at("kind").get<std::string>());
      e.weight = t.value("weight", 1.0);
      if (t.contains("vocabulary")) e.vocabulary = t["vocabulary"].get<std::vector<std::string>>();
    }
    s.validate();
    return s;
  }
};

/// Class index of a categorical tag value; values outside the vocabulary
/// map to the trailing "others" bucket.
inline std::size_t encode_categorical(const ExifRecord& record, std::size_t tag, const TagSchema& schema) {
  if (kTags.at(tag).kind != TagKind::categorical)
    throw Error("encode_categorical: tag '" + std::string(kTags[tag].name) + "' is not categorical");
  if (!record.has(tag)) throw Error("encode_categorical: tag '" + std::string(kTags[tag].name) + "' is absent");
  const auto& vocab = schema.entries.at(tag).vocabulary;
  if (vocab.empty()) throw Error("encode_categorical: schema has no vocabulary for '" + std::string(kTags[tag].name) + "'");
  const std::string value = detail::normalize_categorical(record.categorical(tag));
  for (std::size_t i = 0; i + 1 < vocab.size(); ++i)
    if (detail::normalize_categorical(vocab[i]) == value) return i;
  return vocab.size() - 1;
}

inline std::size_t encode_categorical(const ExifRecord& record, std::string_view tag, const TagSchema& schema) {
  return encode_categorical(record, require_tag(tag), schema);
}

/// 1 when s_tag(x) >= s_tag(y), else 0.
inline int rank_label(const ExifRecord& x, const ExifRecord& y, std::size_t tag) {
  if (!is_numeric(kTags.at(tag).kind))
    throw Error("rank_label: tag '" + std::string(kTags[tag].name) + "' is categorical");
  if (!x.has(tag) || !y.has(tag))
    throw Error("rank_label: tag '" + std::string(kTags[tag].name) + "' is absent");
  return x.numeric(tag) >= y.numeric(tag) ? 1 : 0;
}

inline int rank_label(const ExifRecord& x, const ExifRecord& y, std::string_view tag) {
  return rank_label(x, y, require_tag(tag));
}

}  // namespace sdaie
