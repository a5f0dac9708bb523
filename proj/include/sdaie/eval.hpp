#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdaie/augment.hpp"
#include "sdaie/binary.hpp"
#include "sdaie/dataset.hpp"
#include "sdaie/gmm.hpp"
#include "sdaie/metrics.hpp"
#include "sdaie/pretext.hpp"

namespace sdaie {

/// Final feature of an image in inference mode (every non-overlapping patch).
template <typename T>
Vec<T> forward_features(const Image& img, const Backbone<T>& backbone) {
  const auto& a = backbone.arch();
  return backbone.forward(extract_patches(img, PatchMode::infer, 0, a.patch_size, a.train_patches), nullptr, false).v;
}

struct Detection {
  bool generated = false;
  double raw = 0.0;      // log-likelihood (one-class) or P(photographic) (binary)
  double anomaly = 0.0;  // larger means more likely generated; used for AP
};

/// Either the one-class GMM detector on frozen features or the binary
/// detector. Both read pixels only.
class Detector {
 public:
  static Detector one_class(std::shared_ptr<const Backbone<float>> extractor, GmmModel gmm) {
    if (gmm.dim != extractor->arch().token_dim()) throw Error("detector: GMM dimension does not match the extractor");
    if (!std::isfinite(gmm.tau)) throw Error("detector: GMM has no calibrated threshold");
    Detector d;
    d.extractor_ = std::move(extractor);
    d.gmm_ = std::move(gmm);
    return d;
  }

  static Detector binary(std::shared_ptr<const BinaryModel<float>> model) {
    Detector d;
    d.binary_ = std::move(model);
    return d;
  }

  bool is_binary() const { return binary_ != nullptr; }
  std::string_view kind() const { return is_binary() ? "binary" : "one-class"; }
  const GmmModel& gmm() const { return *gmm_; }

  Detection detect(const Image& img) const {
    Detection d;
    if (binary_) {
      d.raw = predict_prob(img, *binary_);
      d.anomaly = 1.0 - d.raw;
      d.generated = d.raw < 0.5;
    } else {
      const Vec<float> v = forward_features(img, *extractor_);
      d.raw = score(v.cast<double>(), *gmm_);
      d.anomaly = -d.raw;
      d.generated = is_generated(d.raw, gmm_->tau);
    }
    return d;
  }

 private:
  std::shared_ptr<const Backbone<float>> extractor_;
  std::optional<GmmModel> gmm_;
  std::shared_ptr<const BinaryModel<float>> binary_;
};

struct ImageResult {
  std::string image_path;
  Label label = Label::photographic;
  std::string source;
  Detection det;
};

struct SourceMetrics {
  std::string source;
  double accuracy = 0.0;
  double ap = 0.0;
  std::size_t photographic = 0, generated = 0;
};

struct ConditionReport {
  std::string condition;
  std::vector<SourceMetrics> sources;
  double mean_accuracy = 0.0;
  double mean_ap = 0.0;
  std::vector<ImageResult> images;
};

/// Per-source metrics. A source holding both labels is scored on its own; a
/// generated-only source is scored against every photograph from sources
/// without generated images. Aggregates are unweighted means over sources.
inline ConditionReport summarize(std::string condition, std::vector<ImageResult> images) {
  ConditionReport r{std::move(condition), {}, 0.0, 0.0, std::move(images)};
  std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_source;  // photo, generated
  for (std::size_t i = 0; i < r.images.size(); ++i) {
    auto& slot = by_source[r.images[i].source];
    (r.images[i].label == Label::photographic ? slot.first : slot.second).push_back(i);
  }
  std::vector<std::size_t> pool;
  for (const auto& [src, s] : by_source)
    if (s.second.empty()) pool.insert(pool.end(), s.first.begin(), s.first.end());
  for (const auto& [src, s] : by_source) {
    if (s.second.empty()) continue;
    std::vector<std::size_t> members = s.first.empty() ? pool : s.first;
    SourceMetrics m;
    m.source = src;
    m.photographic = members.size();
    m.generated = s.second.size();
    members.insert(members.end(), s.second.begin(), s.second.end());
    std::vector<double> scores;
    std::vector<int> truth, pred;
    for (auto i : members) {
      scores.push_back(r.images[i].det.anomaly);
      truth.push_back(r.images[i].label == Label::generated);
      pred.push_back(r.images[i].det.generated);
    }
    m.accuracy = compute_accuracy(pred, truth);
    m.ap = compute_ap(scores, truth);
    r.sources.push_back(m);
  }
  if (r.sources.empty()) throw Error("evaluate: manifest has no generated images");
  std::vector<double> accs, aps;
  for (const auto& m : r.sources) {
    accs.push_back(m.accuracy);
    aps.push_back(m.ap);
  }
  r.mean_accuracy = mean_of(accs);
  r.mean_ap = mean_of(aps);
  return r;
}

/// Scores every manifest image, optionally after one perturbation.
inline std::vector<ImageResult> run_detector(const DatasetManifest& manifest, const Detector& det, ImageStore& store,
                                             const std::optional<PerturbationSpec>& perturb = std::nullopt) {
  std::vector<ImageResult> out;
  for (const auto& e : manifest.entries) {
    const Image& img = store.get(e);
    const Detection d = perturb ? det.detect(perturb->apply(img)) : det.detect(img);
    out.push_back({e.image_path, e.label, e.source, d});
  }
  return out;
}

inline ConditionReport evaluate(const DatasetManifest& manifest, const Detector& det, ImageStore& store,
                                const std::optional<PerturbationSpec>& perturb = std::nullopt) {
  return summarize(perturb ? perturb->label() : "clean", run_detector(manifest, det, store, perturb));
}

/// The robustness conditions: clean, JPEG q95, blur sigma 1, downsample x2.
inline std::vector<std::optional<PerturbationSpec>> robustness_grid() {
  return {std::nullopt, PerturbationSpec{PerturbOp::jpeg, 95}, PerturbationSpec{PerturbOp::blur, 1.0},
          PerturbationSpec{PerturbOp::downsample, 0.5}};
}

struct EvalReport {
  std::string detector;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> digests;
  std::vector<ConditionReport> conditions;

  nlohmann::json to_json() const {
    nlohmann::json j{{"detector", detector}, {"seed", seed}, {"digests", digests}};
    j["conditions"] = nlohmann::json::array();
    for (const auto& c : conditions) {
      nlohmann::json cj{{"condition", c.condition}, {"mean_accuracy", c.mean_accuracy}, {"mean_ap", c.mean_ap}};
      cj["sources"] = nlohmann::json::array();
      for (const auto& s : c.sources)
        cj["sources"].push_back({{"source", s.source},
                                 {"accuracy", s.accuracy},
                                 {"ap", s.ap},
                                 {"photographic", s.photographic},
                                 {"generated", s.generated}});
      j["conditions"].push_back(std::move(cj));
    }
    return j;
  }
};

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kScoresHeader = "image_path,label,score,decision";

/// One row per image: raw detector score at full precision and the decision.
inline void write_scores_csv(const std::vector<ImageResult>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << kScoresHeader << "\n";
  for (const auto& r : rows)
    out << csv_field(r.image_path) << "," << label_name(r.label) << "," << format_double(r.det.raw) << ","
        << (r.det.generated ? "generated" : "photographic") << "\n";
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline std::vector<ImageResult> export_scores(const DatasetManifest& manifest, const Detector& det, ImageStore& store,
                                              const std::filesystem::path& path) {
  auto rows = run_detector(manifest, det, store);
  write_scores_csv(rows, path);
  return rows;
}

/// image_path, label, then one column per feature dimension.
template <typename T>
void export_features(const DatasetManifest& manifest, const Backbone<T>& backbone, ImageStore& store,
                     const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "image_path,label";
  for (int i = 0; i < backbone.arch().token_dim(); ++i) out << ",f" << i;
  out << "\n";
  for (const auto& e : manifest.entries) {
    const Vec<T> v = forward_features(store.get(e), backbone);
    out << csv_field(e.image_path) << "," << label_name(e.label);
    for (Eigen::Index i = 0; i < v.size(); ++i) out << "," << format_double(static_cast<double>(v(i)));
    out << "\n";
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace sdaie
