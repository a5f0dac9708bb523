#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdaie/augment.hpp"
#include "sdaie/backbone.hpp"
#include "sdaie/checkpoint.hpp"
#include "sdaie/dataset.hpp"
#include "sdaie/exif.hpp"
#include "sdaie/optim.hpp"

namespace sdaie {

inline constexpr double kProbEps = 1e-7;

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

/// -log softmax(logits)[true_class], via log-sum-exp.
template <typename Range>
double loss_categorical(const Range& logits, std::size_t true_class) {
  const std::size_t n = static_cast<std::size_t>(std::size(logits));
  if (true_class >= n) throw Error("loss_categorical: class index out of range");
  double mx = -INFINITY;
  for (auto z : logits) mx = std::max(mx, static_cast<double>(z));
  double sum = 0.0;
  for (auto z : logits) sum += std::exp(static_cast<double>(z) - mx);
  return mx + std::log(sum) - static_cast<double>(*(std::begin(logits) + static_cast<std::ptrdiff_t>(true_class)));
}

inline double loss_categorical(std::initializer_list<double> logits, std::size_t true_class) {
  return loss_categorical(std::vector<double>(logits), true_class);
}

/// Thurstone Case V: P(x ranks above y) = Phi((s_x - s_y) / sqrt 2).
inline double rank_probability(double score_x, double score_y) {
  return normal_cdf((score_x - score_y) / std::numbers::sqrt2);
}

/// Binary cross-entropy between a rank label and the Thurstone probability,
/// with the probability clamped to [eps, 1 - eps].
inline double loss_rank(double score_x, double score_y, int label) {
  const double p = std::clamp(rank_probability(score_x, score_y), kProbEps, 1.0 - kProbEps);
  return label ? -std::log(p) : -std::log(1.0 - p);
}

/// d loss_rank / d (score_x - score_y). Zero where the clamp is active.
inline double loss_rank_grad(double score_x, double score_y, int label) {
  const double z = (score_x - score_y) / std::numbers::sqrt2;
  const double p = normal_cdf(z);
  if (p < kProbEps || p > 1.0 - kProbEps) return 0.0;
  const double dp = normal_pdf(z) / std::numbers::sqrt2;
  return label ? -dp / p : dp / (1.0 - p);
}

struct PretextLossReport {
  std::array<double, kNumTags> tag_loss{};
  std::array<double, kNumTags> tag_accuracy{};
  std::array<std::size_t, kNumTags> tag_count{};  // images (categorical) or pairs (numeric) used
  double total = 0.0;

  double mean_accuracy() const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < kNumTags; ++i)
      if (tag_count[i] > 0) {
        s += tag_accuracy[i];
        ++n;
      }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

/// Shared extractor plus fourteen linear heads (C_i logits for categorical
/// tags, one ranking score for numeric tags).
template <typename T>
class PretextModel {
 public:
  PretextModel(ArchConfig arch, TagSchema schema) : schema_(std::move(schema)), backbone_(arch) {
    schema_.validate();
    for (std::size_t i = 0; i < kNumTags; ++i) {
      const int out = kTags[i].kind == TagKind::categorical ? static_cast<int>(schema_.classes(i)) : 1;
      heads_.emplace_back("heads." + std::string(kTags[i].name), arch.token_dim(), out);
    }
  }

  void init(std::uint64_t seed) {
    backbone_.init(seed);
    Rng rng(mix_seed(seed, 0x4ead));
    for (auto& h : heads_) h.init(rng);
  }

  const TagSchema& schema() const { return schema_; }
  const ArchConfig& arch() const { return backbone_.arch(); }
  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  nn::Linear<T>& head(std::size_t tag) { return heads_.at(tag); }
  const nn::Linear<T>& head(std::size_t tag) const { return heads_.at(tag); }

  template <typename F>
  void visit(F&& f) {
    backbone_.visit(f);
    for (auto& h : heads_) h.visit(f);
  }

 private:
  TagSchema schema_;
  Backbone<T> backbone_;
  std::vector<nn::Linear<T>> heads_;
};

/// Affine head on one feature vector: logits or a scalar score.
template <typename T>
Vec<T> head_forward(const Vec<T>& v, const nn::Linear<T>& head) {
  if (v.size() != head.in_features()) throw Error("head_forward: feature dimension mismatch");
  if (!v.allFinite()) throw Error("head_forward: non-finite feature");
  return head.forward(v.transpose()).transpose();
}

/// Sigmoid-output head (binary detector).
template <typename T>
double head_probability(const Vec<T>& v, const nn::Linear<T>& head) {
  if (head.out_features() != 1) throw Error("head_probability: head must have one output");
  const double z = static_cast<double>(head_forward(v, head)(0));
  return 1.0 / (1.0 + std::exp(-z));
}

/// Evaluates the combined objective on a batch of features. When `dfeatures`
/// is given, head gradients are accumulated and d(total)/d(v_b) is written.
/// Tags absent from a record are skipped for that image or pair.
template <typename T>
PretextLossReport pretext_objective(const std::vector<Vec<T>>& features, const std::vector<ExifRecord>& records,
                                    PretextModel<T>& model, std::vector<Vec<T>>* dfeatures = nullptr) {
  const std::size_t n = features.size();
  if (n != records.size()) throw Error("pretext_objective: features and records differ in length");
  if (n < 2) throw Error("pretext_objective: batch needs at least 2 images");
  const int dim = model.arch().token_dim();
  Mat<T> v(static_cast<Eigen::Index>(n), dim);
  for (std::size_t b = 0; b < n; ++b) v.row(static_cast<Eigen::Index>(b)) = features[b].transpose();
  Mat<T> dv = Mat<T>::Zero(static_cast<Eigen::Index>(n), dim);
  const auto pairs = enumerate_pairs(n);
  PretextLossReport rep;

  for (std::size_t tag = 0; tag < kNumTags; ++tag) {
    const double weight = model.schema().entries[tag].weight;
    auto& head = model.head(tag);
    const Mat<T> out = head.forward(v);
    Mat<T> dout = Mat<T>::Zero(out.rows(), out.cols());
    double loss = 0.0, correct = 0.0;
    std::size_t count = 0;
    if (kTags[tag].kind == TagKind::categorical) {
      for (std::size_t b = 0; b < n; ++b) {
        if (!records[b].has(tag)) continue;
        const std::size_t cls = encode_categorical(records[b], tag, model.schema());
        std::vector<double> logits(static_cast<std::size_t>(out.cols()));
        for (std::size_t c = 0; c < logits.size(); ++c) logits[c] = static_cast<double>(out(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)));
        loss += loss_categorical(logits, cls);
        const auto argmax = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        correct += argmax == cls;
        ++count;
        if (dfeatures) {
          const double mx = *std::max_element(logits.begin(), logits.end());
          double z = 0.0;
          for (double l : logits) z += std::exp(l - mx);
          for (std::size_t c = 0; c < logits.size(); ++c)
            dout(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) =
                static_cast<T>(std::exp(logits[c] - mx) / z - (c == cls ? 1.0 : 0.0));
        }
      }
    } else {
      for (const auto& [i, j] : pairs) {
        if (!records[i].has(tag) || !records[j].has(tag)) continue;
        const int label = rank_label(records[i], records[j], tag);
        const bool tied = label == 1 && rank_label(records[j], records[i], tag) == 1;
        const double si = static_cast<double>(out(static_cast<Eigen::Index>(i), 0));
        const double sj = static_cast<double>(out(static_cast<Eigen::Index>(j), 0));
        double g = 0.0;
        if (tied) {
          // label 1 in both orientations; averaging them keeps the sum order-free
          loss += 0.5 * (loss_rank(si, sj, 1) + loss_rank(sj, si, 1));
          correct += 0.5 * ((rank_probability(si, sj) >= 0.5) + (rank_probability(sj, si) >= 0.5));
          if (dfeatures) g = 0.5 * (loss_rank_grad(si, sj, 1) - loss_rank_grad(sj, si, 1));
        } else {
          loss += loss_rank(si, sj, label);
          correct += (rank_probability(si, sj) >= 0.5 ? 1 : 0) == label;
          if (dfeatures) g = loss_rank_grad(si, sj, label);
        }
        ++count;
        if (dfeatures) {
          dout(static_cast<Eigen::Index>(i), 0) += static_cast<T>(g);
          dout(static_cast<Eigen::Index>(j), 0) -= static_cast<T>(g);
        }
      }
    }
    if (count == 0) continue;
    rep.tag_loss[tag] = loss / static_cast<double>(count);
    rep.tag_accuracy[tag] = correct / static_cast<double>(count);
    rep.tag_count[tag] = count;
    rep.total += weight * rep.tag_loss[tag];
    if (dfeatures && weight != 0.0) {
      dout *= static_cast<T>(weight / static_cast<double>(count));
      dv += head.backward(v, dout);
    }
  }
  if (dfeatures) {
    dfeatures->resize(n);
    for (std::size_t b = 0; b < n; ++b) (*dfeatures)[b] = dv.row(static_cast<Eigen::Index>(b)).transpose();
  }
  return rep;
}

/// Train-mode patch seed for an image at a given step of a seeded run.
inline std::uint64_t patch_seed(std::uint64_t run_seed, std::string_view path) {
  return mix_seed(run_seed, image_seed(path));
}

/// Loss of a minibatch under the current parameters (no gradients).
template <typename T>
PretextLossReport total_pretext_loss(const Minibatch& batch, PretextModel<T>& model, std::uint64_t seed) {
  std::vector<Vec<T>> feats;
  const auto& arch = model.arch();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto patches = extract_patches(batch.images[b], PatchMode::train, patch_seed(seed, batch.paths[b]), arch.patch_size,
                                   arch.train_patches);
    feats.push_back(model.backbone().forward(patches, nullptr, false).v);
  }
  return pretext_objective(feats, batch.records, model);
}

struct PretextConfig {
  long iterations = 30000;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::size_t top_c = 30;
  bool augment = true;
  long checkpoint_every = 0;  // 0: every 10% of iterations
  std::size_t max_cached_patches = 256;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ArchConfig arch;

  AdamConfig adam() const { return {lr, beta1, beta2, eps}; }

  nlohmann::json to_json() const {
    return {{"iterations", iterations}, {"lr", lr},           {"batch_size", batch_size},
            {"seed", seed},             {"top_c", top_c},     {"augment", augment},
            {"checkpoint_every", checkpoint_every},           {"max_cached_patches", max_cached_patches},
            {"beta1", beta1},           {"beta2", beta2},     {"eps", eps},
            {"arch", arch.to_json()}};
  }

  static PretextConfig from_json(const nlohmann::json& j) {
    PretextConfig c;
    c.iterations = j.value("iterations", c.iterations);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.top_c = j.value("top_c", c.top_c);
    c.augment = j.value("augment", c.augment);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.max_cached_patches = j.value("max_cached_patches", c.max_cached_patches);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    if (j.contains("arch")) c.arch = ArchConfig::from_json(j["arch"]);
    return c;
  }
};

struct TrainLogRow {
  long iteration = 0;
  PretextLossReport report;
};

inline std::string pretext_log_header() {
  std::string h = "iteration";
  for (const auto& t : kTags) h += ",loss_" + std::string(t.name);
  for (const auto& t : kTags) h += ",acc_" + std::string(t.name);
  return h + ",total_loss";
}

inline std::string pretext_log_row(const TrainLogRow& r) {
  std::string s = std::to_string(r.iteration);
  char buf[40];
  for (double v : r.report.tag_loss) {
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    s += buf;
  }
  for (double v : r.report.tag_accuracy) {
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, ",%.9g", r.report.total);
  return s + buf;
}

inline void write_pretext_log(const std::vector<TrainLogRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write training log '" + path.string() + "'");
  out << pretext_log_header() << "\n";
  for (const auto& r : rows) out << pretext_log_row(r) << "\n";
}

inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_pretext(PretextModel<T>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto params = collect_params<T>(model);
  save_weights(params, dir / "weights.bin");
  io::write_json({{"format", "sdaie-checkpoint"},
                  {"version", kCheckpointVersion},
                  {"kind", "pretext"},
                  {"arch", model.arch().to_json()},
                  {"tag_schema", model.schema().to_json()},
                  {"weights", "weights.bin"},
                  {"digest", hex64(params_digest(params))}},
                 dir / "schema.json");
}

inline nlohmann::json read_checkpoint_schema(const std::filesystem::path& dir) {
  auto j = io::read_json(dir / "schema.json");
  if (j.value("format", "") != "sdaie-checkpoint") throw Error("'" + dir.string() + "' is not a checkpoint directory");
  if (j.value("version", 0) != kCheckpointVersion) throw Error("unsupported checkpoint version");
  return j;
}

template <typename T>
PretextModel<T> load_pretext(const std::filesystem::path& dir) {
  const auto j = read_checkpoint_schema(dir);
  if (j.value("kind", "") != "pretext") throw Error("'" + dir.string() + "' is not a pretext checkpoint");
  PretextModel<T> model(ArchConfig::from_json(j.at("arch")), TagSchema::from_json(j.at("tag_schema")));
  load_weights(collect_params<T>(model), dir / j.value("weights", "weights.bin"));
  return model;
}

struct PretextTrainResult {
  PretextModel<float> model;
  std::vector<TrainLogRow> log;
};

/// Adam on the combined objective. Every random choice (batches, crops,
/// augmentation, initialization) derives from config.seed.
inline PretextTrainResult train_pretext(const DatasetManifest& manifest, const PretextConfig& cfg, ImageStore& store,
                                        const std::filesystem::path& checkpoint_dir = {},
                                        const std::function<void(const TrainLogRow&)>& on_step = {}) {
  if (manifest.size() < 2) throw Error("train_pretext: need at least 2 complete entries");
  for (const auto& e : manifest.entries)
    if (!e.exif || !e.exif->complete()) throw Error("train_pretext: manifest must be filtered to complete EXIF");
  if (cfg.batch_size < 2 || cfg.batch_size > manifest.size()) throw Error("train_pretext: invalid batch size");

  std::vector<ExifRecord> records;
  for (const auto& e : manifest.entries) records.push_back(*e.exif);
  PretextModel<float> model(cfg.arch, TagSchema::build(records, cfg.top_c));
  model.init(cfg.seed);
  auto params = collect_params<float>(model);
  Adam<float> adam(params, cfg.adam());

  const long every = cfg.checkpoint_every > 0 ? cfg.checkpoint_every : std::max(1L, cfg.iterations / 10);
  const auto& arch = cfg.arch;
  const bool keep_caches = cfg.batch_size * static_cast<std::size_t>(arch.train_patches) <= cfg.max_cached_patches;
  std::vector<TrainLogRow> log;

  for (long it = 0; it < cfg.iterations; ++it) {
    const std::uint64_t step_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(it) + 1);
    const auto idx = sample_indices(manifest.size(), cfg.batch_size, step_seed);
    std::vector<std::vector<Image>> patch_sets;
    std::vector<ExifRecord> batch_records;
    for (auto i : idx) {
      const auto& e = manifest.entries[i];
      const std::uint64_t s = patch_seed(step_seed, e.image_path);
      const Image& src = store.get(e);
      const Image img = cfg.augment ? random_augment(src, s) : src;
      patch_sets.push_back(extract_patches(img, PatchMode::train, s, arch.patch_size, arch.train_patches));
      batch_records.push_back(*e.exif);
    }

    std::vector<Backbone<float>::Cache> caches(keep_caches ? idx.size() : 0);
    std::vector<Vec<float>> feats;
    for (std::size_t b = 0; b < idx.size(); ++b)
      feats.push_back(model.backbone().forward(patch_sets[b], keep_caches ? &caches[b] : nullptr, false).v);

    zero_grads(params);
    std::vector<Vec<float>> dfeats;
    TrainLogRow row{it, pretext_objective(feats, batch_records, model, &dfeats)};
    if (!std::isfinite(row.report.total))
      throw Error("train_pretext: non-finite loss at iteration " + std::to_string(it));

    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (keep_caches) {
        model.backbone().backward(caches[b], dfeats[b]);
        caches[b] = {};
      } else {
        Backbone<float>::Cache cache;
        model.backbone().forward(patch_sets[b], &cache, false);
        model.backbone().backward(cache, dfeats[b]);
      }
    }
    adam.step();
    log.push_back(row);
    if (on_step) on_step(row);

    if (!checkpoint_dir.empty() && (it + 1) % every == 0 && it + 1 < cfg.iterations) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%07ld", it + 1);
      save_pretext(model, checkpoint_dir / name);
    }
  }
  if (!checkpoint_dir.empty()) {
    save_pretext(model, checkpoint_dir);
    write_pretext_log(log, checkpoint_dir / "train_log.csv");
  }
  return {std::move(model), std::move(log)};
}

/// Objective and tag accuracies over a whole manifest, in batches, using
/// each image's deterministic patch seed.
template <typename T>
PretextLossReport evaluate_pretext(PretextModel<T>& model, const DatasetManifest& manifest, ImageStore& store,
                                   std::size_t batch_size = 16) {
  PretextLossReport sum;
  std::array<double, kNumTags> loss_acc{}, acc_acc{};
  std::array<std::size_t, kNumTags> counts{};
  for (std::size_t start = 0; start + 1 < manifest.size(); start += batch_size) {
    const std::size_t end = std::min(manifest.size(), start + batch_size);
    if (end - start < 2) break;
    std::vector<Vec<T>> feats;
    std::vector<ExifRecord> recs;
    for (std::size_t i = start; i < end; ++i) {
      const auto& e = manifest.entries[i];
      const auto& arch = model.arch();
      auto patches = extract_patches(store.get(e), PatchMode::train, image_seed(e.image_path), arch.patch_size,
                                     arch.train_patches);
      feats.push_back(model.backbone().forward(patches, nullptr, false).v);
      recs.push_back(e.exif.value_or(ExifRecord{}));
    }
    const auto rep = pretext_objective(feats, recs, model);
    for (std::size_t t = 0; t < kNumTags; ++t) {
      loss_acc[t] += rep.tag_loss[t] * static_cast<double>(rep.tag_count[t]);
      acc_acc[t] += rep.tag_accuracy[t] * static_cast<double>(rep.tag_count[t]);
      counts[t] += rep.tag_count[t];
    }
  }
  for (std::size_t t = 0; t < kNumTags; ++t) {
    if (counts[t] == 0) continue;
    sum.tag_loss[t] = loss_acc[t] / static_cast<double>(counts[t]);
    sum.tag_accuracy[t] = acc_acc[t] / static_cast<double>(counts[t]);
    sum.tag_count[t] = counts[t];
    sum.total += model.schema().entries[t].weight * sum.tag_loss[t];
  }
  return sum;
}

}  // namespace sdaie
