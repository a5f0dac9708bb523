#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdaie/augment.hpp"
#include "sdaie/backbone.hpp"
#include "sdaie/checkpoint.hpp"
#include "sdaie/dataset.hpp"
#include "sdaie/optim.hpp"
#include "sdaie/pretext.hpp"

namespace sdaie {

/// Classification target: photographic = 1, generated = 0.
inline int binary_target(Label l) { return l == Label::photographic ? 1 : 0; }

inline double loss_cls(double prob, int label) {
  const double p = std::clamp(prob, kProbEps, 1.0 - kProbEps);
  return label ? -std::log(p) : -std::log(1.0 - p);
}

/// d loss_cls / d logit for a sigmoid output; zero inside the clamped region.
inline double loss_cls_logit_grad(double prob, int label) {
  if (prob < kProbEps || prob > 1.0 - kProbEps) return 0.0;
  return prob - label;
}

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

/// Mean over stages of ||live_l - ref_l||^2 / D_l. Writes d/d(live_l) when asked.
template <typename T>
double loss_reg(const std::vector<Vec<T>>& live, const std::vector<Vec<T>>& ref, std::vector<Vec<T>>* grad = nullptr) {
  if (live.size() != ref.size() || live.empty()) throw Error("loss_reg: stage sets differ");
  double total = 0.0;
  if (grad) grad->resize(live.size());
  const double inv_l = 1.0 / static_cast<double>(live.size());
  for (std::size_t l = 0; l < live.size(); ++l) {
    if (live[l].size() != ref[l].size())
      throw Error("loss_reg: stage " + std::to_string(l) + " dimension " + std::to_string(live[l].size()) +
                  " != " + std::to_string(ref[l].size()));
    const auto d = static_cast<double>(live[l].size());
    double sq = 0.0;
    for (Eigen::Index i = 0; i < live[l].size(); ++i) {
      const double diff = static_cast<double>(live[l](i)) - static_cast<double>(ref[l](i));
      sq += diff * diff;
    }
    total += sq / d;
    if (grad) (*grad)[l] = ((live[l] - ref[l]) * static_cast<T>(2.0 * inv_l / d)).eval();
  }
  return total * inv_l;
}

// Reference cache archive (little-endian):
//   "SDAIERC1", string theta_digest, u32 stage_count, u32 dims[stage_count],
//   u32 entry_count, per entry {string path, u64 offset}, float32 data
//   (each entry is its stages concatenated; offset counts floats).
inline constexpr char kCacheMagic[8] = {'S', 'D', 'A', 'I', 'E', 'R', 'C', '1'};

struct ReferenceCache {
  std::string theta_digest;
  std::vector<int> stage_dims;
  std::map<std::string, std::vector<Vec<float>>> entries;

  std::size_t size() const { return entries.size(); }

  const std::vector<Vec<float>>& at(const std::string& path) const {
    auto it = entries.find(path);
    if (it == entries.end()) throw Error("reference cache has no entry for '" + path + "'");
    return it->second;
  }

  std::uint64_t digest() const {
    Fnv1a h;
    h.update(theta_digest);
    for (int d : stage_dims) h.update(&d, sizeof d);
    for (const auto& [path, stages] : entries) {
      h.update(path);
      for (const auto& s : stages) h.update(s.data(), static_cast<std::size_t>(s.size()) * sizeof(float));
    }
    return h.value();
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write '" + path.string() + "'");
    os.write(kCacheMagic, 8);
    io::put_string(os, theta_digest);
    io::put_u32(os, static_cast<std::uint32_t>(stage_dims.size()));
    std::uint64_t per_entry = 0;
    for (int d : stage_dims) {
      io::put_u32(os, static_cast<std::uint32_t>(d));
      per_entry += static_cast<std::uint64_t>(d);
    }
    io::put_u32(os, static_cast<std::uint32_t>(entries.size()));
    std::uint64_t offset = 0;
    for (const auto& [p, stages] : entries) {
      io::put_string(os, p);
      io::put_u64(os, offset);
      offset += per_entry;
    }
    for (const auto& [p, stages] : entries)
      for (const auto& s : stages) io::write_floats(os, s.data(), static_cast<std::size_t>(s.size()));
    if (!os) throw Error("failed writing '" + path.string() + "'");
  }

  static ReferenceCache load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open '" + path.string() + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCacheMagic, 8) != 0)
      throw Error("'" + path.string() + "' is not a reference cache");
    ReferenceCache c;
    c.theta_digest = io::get_string(is);
    const auto ns = io::get_u32(is);
    for (std::uint32_t i = 0; i < ns; ++i) c.stage_dims.push_back(static_cast<int>(io::get_u32(is)));
    const auto ne = io::get_u32(is);
    std::vector<std::string> paths;
    for (std::uint32_t i = 0; i < ne; ++i) {
      paths.push_back(io::get_string(is));
      io::get_u64(is);
    }
    for (const auto& p : paths) {
      std::vector<Vec<float>> stages;
      for (int d : c.stage_dims) {
        Vec<float> v(d);
        io::read_floats(is, v.data(), static_cast<std::size_t>(d));
        stages.push_back(std::move(v));
      }
      c.entries.emplace(p, std::move(stages));
    }
    return c;
  }
};

/// Image seen by the extractor during binary training and caching: the
/// optional augmentation is drawn once per image so live and cached
/// features stay aligned.
inline Image binary_training_view(const Image& img, std::string_view path, bool augment) {
  return augment ? random_augment(img, image_seed(path)) : img;
}

inline std::vector<Image> binary_training_patches(const Image& img, std::string_view path, bool augment,
                                                  const ArchConfig& arch) {
  return extract_patches(binary_training_view(img, path, augment), PatchMode::train, image_seed(path), arch.patch_size,
                         arch.train_patches);
}

/// One forward pass per image with the frozen extractor and the image's
/// deterministic patch seed.
template <typename T>
ReferenceCache cache_reference_features(const DatasetManifest& manifest, const Backbone<T>& frozen, ImageStore& store,
                                        bool augment = false, const std::string& theta_digest = {}) {
  ReferenceCache c;
  c.theta_digest = theta_digest;
  c.stage_dims = frozen.arch().stage_dims();
  for (const auto& e : manifest.entries) {
    const auto patches = binary_training_patches(store.get(e), e.image_path, augment, frozen.arch());
    auto out = frozen.forward(patches, nullptr, true);
    std::vector<Vec<float>> stages;
    for (auto& s : out.stages) stages.push_back(s.template cast<float>());
    c.entries[e.image_path] = std::move(stages);
  }
  return c;
}

/// Extractor initialized from the pretext weights plus a sigmoid head.
template <typename T>
class BinaryModel {
 public:
  explicit BinaryModel(ArchConfig arch) : backbone_(arch), head_("classifier", arch.token_dim(), 1) {}

  void init_head(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0xc1a5));
    head_.init_uniform(rng, 1e-3);
  }

  template <typename S>
  void load_backbone(Backbone<S>& src) {
    copy_params(collect_params<S>(src), collect_params<T>(backbone_));
  }

  const ArchConfig& arch() const { return backbone_.arch(); }
  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  nn::Linear<T>& head() { return head_; }
  const nn::Linear<T>& head() const { return head_; }

  template <typename F>
  void visit(F&& f) {
    backbone_.visit(f);
    head_.visit(f);
  }

 private:
  Backbone<T> backbone_;
  nn::Linear<T> head_;
};

struct BinaryLossTerms {
  double cls = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double prob = 0.5;
};

/// loss_cls + gamma * loss_reg for one image's patches; when `backprop` is
/// set, gradients scaled by `weight` are accumulated into the model.
template <typename T>
BinaryLossTerms binary_image_loss(BinaryModel<T>& model, const std::vector<Image>& patches, int label,
                                  const std::vector<Vec<T>>& ref, double gamma, bool backprop, double weight = 1.0) {
  typename Backbone<T>::Cache cache;
  const bool need_stages = gamma != 0.0;
  auto out = model.backbone().forward(patches, backprop ? &cache : nullptr, need_stages);
  const Mat<T> x = out.v.transpose();
  const double z = static_cast<double>(model.head().forward(x)(0, 0));
  BinaryLossTerms t;
  t.prob = sigmoid(z);
  t.cls = loss_cls(t.prob, label);
  std::vector<Vec<T>> dstages;
  if (need_stages) t.reg = loss_reg(out.stages, ref, backprop ? &dstages : nullptr);
  t.total = t.cls + gamma * t.reg;
  if (backprop) {
    Mat<T> dz(1, 1);
    dz(0, 0) = static_cast<T>(weight * loss_cls_logit_grad(t.prob, label));
    Vec<T> dv = model.head().backward(x, dz).transpose();
    if (need_stages) {
      for (auto& g : dstages) g *= static_cast<T>(weight * gamma);
      model.backbone().backward(cache, dv, &dstages);
    } else {
      model.backbone().backward(cache, dv);
    }
  }
  return t;
}

struct BinaryLossReport {
  double cls = 0.0, reg = 0.0, total = 0.0, accuracy = 0.0;
};

/// Batch mean of loss_cls + gamma * loss_reg. The regularizer applies to
/// every image regardless of label.
template <typename T>
BinaryLossReport loss_binary_total(BinaryModel<T>& model, const Minibatch& batch, const ReferenceCache& cache,
                                   double gamma, bool augment = false, bool backprop = false) {
  if (!(gamma >= 0)) throw Error("loss_binary_total: gamma must be >= 0");
  if (batch.size() == 0) throw Error("loss_binary_total: empty batch");
  BinaryLossReport r;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto patches = binary_training_patches(batch.images[b], batch.paths[b], augment, model.arch());
    std::vector<Vec<T>> ref;
    if (gamma != 0.0)
      for (const auto& s : cache.at(batch.paths[b])) ref.push_back(s.template cast<T>());
    const int label = binary_target(batch.labels[b]);
    const auto t = binary_image_loss(model, patches, label, ref, gamma, backprop, w);
    r.cls += w * t.cls;
    r.reg += w * t.reg;
    r.total += w * t.total;
    r.accuracy += w * ((t.prob >= 0.5 ? 1 : 0) == label);
  }
  return r;
}

struct BinaryConfig {
  long iterations = 1800;
  double lr = 1e-3;
  std::size_t batch_size = 100;
  double gamma = 0.05;
  std::uint64_t seed = 0;
  bool augment = true;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  AdamConfig adam() const { return {lr, beta1, beta2, eps}; }

  nlohmann::json to_json() const {
    return {{"iterations", iterations}, {"lr", lr},         {"batch_size", batch_size}, {"gamma", gamma},
            {"seed", seed},             {"augment", augment}, {"beta1", beta1},         {"beta2", beta2},
            {"eps", eps}};
  }

  static BinaryConfig from_json(const nlohmann::json& j) {
    BinaryConfig c;
    c.iterations = j.value("iterations", c.iterations);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.gamma = j.value("gamma", c.gamma);
    c.seed = j.value("seed", c.seed);
    c.augment = j.value("augment", c.augment);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    return c;
  }
};

struct BinaryLogRow {
  long iteration = 0;
  BinaryLossReport report;
};

inline void write_binary_log(const std::vector<BinaryLogRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write training log '" + path.string() + "'");
  out << "iteration,loss_cls,loss_reg,total_loss,accuracy\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.report.cls, r.report.reg, r.report.total,
                  r.report.accuracy);
    out << buf;
  }
}

template <typename T>
void save_binary(BinaryModel<T>& model, const std::filesystem::path& dir, const std::string& theta_star_digest) {
  std::filesystem::create_directories(dir);
  auto params = collect_params<T>(model);
  save_weights(params, dir / "weights.bin");
  io::write_json({{"format", "sdaie-checkpoint"},
                  {"version", kCheckpointVersion},
                  {"kind", "binary"},
                  {"arch", model.arch().to_json()},
                  {"theta_star_digest", theta_star_digest},
                  {"weights", "weights.bin"},
                  {"digest", hex64(params_digest(params))}},
                 dir / "schema.json");
}

template <typename T>
BinaryModel<T> load_binary(const std::filesystem::path& dir) {
  const auto j = read_checkpoint_schema(dir);
  if (j.value("kind", "") != "binary") throw Error("'" + dir.string() + "' is not a binary-detector checkpoint");
  BinaryModel<T> model(ArchConfig::from_json(j.at("arch")));
  load_weights(collect_params<T>(model), dir / j.value("weights", "weights.bin"));
  return model;
}

/// Balanced batches (half of each label), Adam, theta initialized from the
/// frozen extractor.
inline BinaryModel<float> train_binary(const DatasetManifest& manifest, Backbone<float>& theta_star,
                                       const ReferenceCache& cache, const BinaryConfig& cfg, ImageStore& store,
                                       std::vector<BinaryLogRow>* log = nullptr,
                                       const std::function<void(const BinaryLogRow&)>& on_step = {}) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < manifest.size(); ++i)
    (manifest.entries[i].label == Label::photographic ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw Error("train_binary: manifest must contain both labels");
  if (cfg.batch_size < 2) throw Error("train_binary: batch size must be >= 2");
  const std::size_t half = cfg.batch_size / 2;
  if (half > pos.size() || cfg.batch_size - half > neg.size())
    throw Error("train_binary: batch size exceeds the smaller label group");
  if (!(cfg.gamma >= 0)) throw Error("train_binary: gamma must be >= 0");

  BinaryModel<float> model(theta_star.arch());
  model.load_backbone(theta_star);
  model.init_head(cfg.seed);
  auto params = collect_params<float>(model);
  Adam<float> adam(params, cfg.adam());

  for (long it = 0; it < cfg.iterations; ++it) {
    const std::uint64_t step_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(it) + 1);
    std::vector<std::size_t> idx;
    for (auto k : sample_indices(pos.size(), half, mix_seed(step_seed, 1))) idx.push_back(pos[k]);
    for (auto k : sample_indices(neg.size(), cfg.batch_size - half, mix_seed(step_seed, 2))) idx.push_back(neg[k]);
    const Minibatch batch = make_batch(manifest, idx, store);
    zero_grads(params);
    BinaryLogRow row{it, loss_binary_total(model, batch, cache, cfg.gamma, cfg.augment, true)};
    if (!std::isfinite(row.report.total)) throw Error("train_binary: non-finite loss at iteration " + std::to_string(it));
    adam.step();
    if (log) log->push_back(row);
    if (on_step) on_step(row);
  }
  return model;
}

/// Probability that the image is photographic, from pixels only (all
/// non-overlapping patches).
template <typename T>
double predict_prob(const Image& image, const BinaryModel<T>& model) {
  const auto& arch = model.arch();
  const auto patches = extract_patches(image, PatchMode::infer, 0, arch.patch_size, arch.train_patches);
  const auto out = model.backbone().forward(patches, nullptr, false);
  const Mat<T> x = out.v.transpose();
  return sigmoid(static_cast<double>(model.head().forward(x)(0, 0)));
}

}  // namespace sdaie
