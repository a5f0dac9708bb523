#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdaie/common.hpp"
#include "sdaie/filterbank.hpp"
#include "sdaie/image.hpp"
#include "sdaie/nn.hpp"

namespace sdaie {

/// Architectural constants. Defaults give the 528-dim extractor; smaller
/// settings are accepted for tests.
struct ArchConfig {
  int patch_size = 64;
  int train_patches = 16;
  int channels = 32;
  int blocks = 11;
  int pooled_blocks = 3;
  int encoder_layers = 2;
  int heads = 4;
  int ff_width = 1024;

  int token_dim() const { return channels * (channels + 1) / 2; }
  int final_side() const { return patch_size >> pooled_blocks; }
  int stage_count() const { return blocks + 1; }

  /// Flattened size of each stored stage (block outputs, then the final feature).
  std::vector<int> stage_dims() const {
    std::vector<int> dims;
    int side = patch_size;
    for (int b = 0; b < blocks; ++b) {
      if (b < pooled_blocks) side /= 2;
      dims.push_back(channels * side * side);
    }
    dims.push_back(token_dim());
    return dims;
  }

  void validate() const {
    if (patch_size < kKernelSide) throw Error("arch: patch_size must be >= 5");
    if (blocks < 1 || pooled_blocks < 0 || pooled_blocks > blocks) throw Error("arch: invalid block/pool counts");
    if ((patch_size % (1 << pooled_blocks)) != 0) throw Error("arch: patch_size must be divisible by 2^pooled_blocks");
    if (final_side() * final_side() < 2) throw Error("arch: covariance pooling needs at least 2 positions");
    if (channels < 1 || heads < 1 || token_dim() % heads != 0) throw Error("arch: token_dim must be divisible by heads");
    if (encoder_layers < 0 || ff_width < 1 || train_patches < 1) throw Error("arch: invalid transformer settings");
  }

  nlohmann::json to_json() const {
    return {{"patch_size", patch_size},         {"train_patches", train_patches}, {"channels", channels},
            {"blocks", blocks},                 {"pooled_blocks", pooled_blocks}, {"encoder_layers", encoder_layers},
            {"heads", heads},                   {"ff_width", ff_width},           {"token_dim", token_dim()}};
  }

  static ArchConfig from_json(const nlohmann::json& j) {
    ArchConfig a;
    a.patch_size = j.value("patch_size", a.patch_size);
    a.train_patches = j.value("train_patches", a.train_patches);
    a.channels = j.value("channels", a.channels);
    a.blocks = j.value("blocks", a.blocks);
    a.pooled_blocks = j.value("pooled_blocks", a.pooled_blocks);
    a.encoder_layers = j.value("encoder_layers", a.encoder_layers);
    a.heads = j.value("heads", a.heads);
    a.ff_width = j.value("ff_width", a.ff_width);
    a.validate();
    if (j.contains("token_dim") && j["token_dim"].get<int>() != a.token_dim())
      throw Error("arch: token_dim does not match channels");
    return a;
  }

  bool operator==(const ArchConfig&) const = default;
};

enum class PatchMode { train, infer };

/// Reflect-pads an image so both sides are at least `min_side`.
inline Image pad_to(const Image& img, int min_side) {
  if (img.height >= min_side && img.width >= min_side) return img;
  const int h = std::max(img.height, min_side), w = std::max(img.width, min_side);
  Image out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(reflect_index(y, img.height), reflect_index(x, img.width), c);
  return out;
}

inline Image crop(const Image& img, int top, int left, int side) {
  Image out(side, side);
  for (int y = 0; y < side; ++y)
    std::copy_n(&img.data[(static_cast<std::size_t>(top + y) * img.width + left) * 3], static_cast<std::size_t>(side) * 3,
                &out.data[static_cast<std::size_t>(y) * side * 3]);
  return out;
}

/// Train mode: `count` random (possibly overlapping) crops drawn from `seed`.
/// Infer mode: every non-overlapping tile in raster order. Coordinates are
/// not returned; nothing downstream sees patch positions.
inline std::vector<Image> extract_patches(const Image& image, PatchMode mode, std::uint64_t seed, int side = 64,
                                          int count = 16) {
  const Image img = pad_to(image, side);
  std::vector<Image> patches;
  if (mode == PatchMode::train) {
    Rng rng(seed);
    for (int i = 0; i < count; ++i) {
      const int top = static_cast<int>(rng.integer(0, img.height - side));
      const int left = static_cast<int>(rng.integer(0, img.width - side));
      patches.push_back(crop(img, top, left, side));
    }
  } else {
    for (int top = 0; top + side <= img.height; top += side)
      for (int left = 0; left + side <= img.width; left += side) patches.push_back(crop(img, top, left, side));
  }
  return patches;
}

/// Upper triangle (row-major, diagonal included) of the unbiased channel
/// covariance of a (C x positions) map.
template <typename T>
Vec<T> covariance_pool(const Mat<T>& map) {
  const Eigen::Index c = map.rows(), p = map.cols();
  if (p < 2) throw Error("covariance_pool: need at least 2 spatial positions");
  Mat<T> centered = map.colwise() - map.rowwise().mean();
  Mat<T> cov = (centered * centered.transpose()) / static_cast<T>(p - 1);
  Vec<T> token(c * (c + 1) / 2);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = i; j < c; ++j) token(k++) = cov(i, j);
  return token;
}

template <typename T>
Mat<T> covariance_pool_backward(const Mat<T>& map, const Vec<T>& dtoken) {
  const Eigen::Index c = map.rows(), p = map.cols();
  Mat<T> centered = map.colwise() - map.rowwise().mean();
  Mat<T> g = Mat<T>::Zero(c, c);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = i; j < c; ++j) g(i, j) = dtoken(k++);
  Mat<T> sym = g + g.transpose();
  return (sym * centered) / static_cast<T>(p - 1);
}

/// Rebuilds the symmetric matrix from a covariance token.
template <typename T>
Mat<T> unflatten_covariance(const Vec<T>& token, int channels) {
  Mat<T> m(channels, channels);
  Eigen::Index k = 0;
  for (int i = 0; i < channels; ++i)
    for (int j = i; j < channels; ++j) m(i, j) = m(j, i) = token(k++);
  return m;
}

template <typename T>
struct FeatureOutput {
  Vec<T> v;                   // final feature
  std::vector<Vec<T>> stages; // per-block outputs averaged over patches, then v
};

template <typename T>
class Backbone {
 public:
  struct PatchCache {
    std::vector<typename nn::ConvBlock<T>::Cache> blocks;
    Mat<T> map;
  };
  struct Cache {
    std::vector<PatchCache> patches;
    std::vector<typename nn::EncoderLayer<T>::Cache> layers;
  };

  explicit Backbone(ArchConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    for (int b = 0; b < cfg_.blocks; ++b) {
      char name[32];
      std::snprintf(name, sizeof name, "encoder.block%02d", b);
      blocks_.emplace_back(name, b == 0 ? kBankSize : cfg_.channels, cfg_.channels, b < cfg_.pooled_blocks);
    }
    for (int l = 0; l < cfg_.encoder_layers; ++l)
      layers_.emplace_back("transformer.layer" + std::to_string(l), cfg_.token_dim(), cfg_.heads, cfg_.ff_width);
  }

  void init(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0xbacb));
    for (auto& b : blocks_) b.init(rng);
    for (auto& l : layers_) l.init(rng);
  }

  const ArchConfig& arch() const { return cfg_; }
  const FilterBank<T>& bank() const { return bank_; }

  /// Conv encoding of one residual stack; returns the final (C x side^2) map
  /// and appends every block output to `block_outputs` when given.
  Mat<T> encode(const Mat<T>& stack, std::vector<Mat<T>>* block_outputs, PatchCache* cache) const {
    if (stack.rows() != kBankSize || stack.cols() != static_cast<Eigen::Index>(cfg_.patch_size) * cfg_.patch_size)
      throw Error("conv_encode: expected a 30 x " + std::to_string(cfg_.patch_size) + "^2 residual stack");
    if (cache) cache->blocks.resize(blocks_.size());
    Mat<T> x = stack;
    int side = cfg_.patch_size;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      x = blocks_[b].forward(x, side, side, cache ? &cache->blocks[b] : nullptr);
      if (blocks_[b].pools()) side /= 2;
      if (block_outputs) block_outputs->push_back(x);
    }
    if (cache) cache->map = x;
    return x;
  }

  /// Transformer over an unordered token set (tokens x dim), mean-pooled.
  Vec<T> aggregate(const Mat<T>& tokens, Cache* cache) const {
    if (tokens.rows() < 1) throw Error("transformer_aggregate: empty token set");
    if (tokens.cols() != cfg_.token_dim()) throw Error("transformer_aggregate: token dimension mismatch");
    if (cache) cache->layers.resize(layers_.size());
    Mat<T> x = tokens;
    for (std::size_t l = 0; l < layers_.size(); ++l) x = layers_[l].forward(x, cache ? &cache->layers[l] : nullptr);
    return x.colwise().mean().transpose();
  }

  FeatureOutput<T> forward(const std::vector<Image>& patches, Cache* cache = nullptr, bool want_stages = true) const {
    if (patches.empty()) throw Error("forward: no patches");
    const auto n = static_cast<Eigen::Index>(patches.size());
    Mat<T> tokens(n, cfg_.token_dim());
    FeatureOutput<T> out;
    std::vector<Mat<T>> sums;
    if (cache) cache->patches.assign(patches.size(), {});
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& p = patches[static_cast<std::size_t>(i)];
      if (p.height != cfg_.patch_size || p.width != cfg_.patch_size) throw Error("forward: patch size mismatch");
      std::vector<Mat<T>> outputs;
      Mat<T> map = encode(bank_.apply(p), want_stages ? &outputs : nullptr,
                          cache ? &cache->patches[static_cast<std::size_t>(i)] : nullptr);
      tokens.row(i) = covariance_pool(map).transpose();
      if (want_stages) {
        if (sums.empty())
          sums = std::move(outputs);
        else
          for (std::size_t b = 0; b < sums.size(); ++b) sums[b] += outputs[b];
      }
    }
    out.v = aggregate(tokens, cache);
    if (want_stages) {
      for (auto& s : sums) {
        s /= static_cast<T>(n);
        out.stages.emplace_back(Eigen::Map<const Vec<T>>(s.data(), s.size()));
      }
      out.stages.push_back(out.v);
    }
    return out;
  }

  /// Backpropagates d(loss)/d(v) and optional per-stage gradients (same
  /// layout as FeatureOutput::stages; the last entry adds to dv).
  void backward(const Cache& cache, const Vec<T>& dv, const std::vector<Vec<T>>* dstages = nullptr) {
    const auto n = static_cast<Eigen::Index>(cache.patches.size());
    Vec<T> dfinal = dv;
    if (dstages) {
      if (dstages->size() != static_cast<std::size_t>(cfg_.stage_count())) throw Error("backward: stage count mismatch");
      dfinal += dstages->back();
    }
    Mat<T> dx = (dfinal / static_cast<T>(n)).transpose().replicate(n, 1);
    for (std::size_t l = layers_.size(); l-- > 0;) dx = layers_[l].backward(cache.layers[l], dx);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& pc = cache.patches[static_cast<std::size_t>(i)];
      Mat<T> dmap = covariance_pool_backward<T>(pc.map, dx.row(i).transpose());
      for (std::size_t b = blocks_.size(); b-- > 0;) {
        if (dstages) {
          const Vec<T>& ds = (*dstages)[b];
          dmap += Eigen::Map<const Mat<T>>(ds.data(), dmap.rows(), dmap.cols()) / static_cast<T>(n);
        }
        Mat<T> dprev;
        blocks_[b].backward(pc.blocks[b], dmap, b > 0 ? &dprev : nullptr);
        dmap = std::move(dprev);
      }
    }
  }

  template <typename F>
  void visit(F&& f) {
    for (auto& b : blocks_) b.visit(f);
    for (auto& l : layers_) l.visit(f);
  }

 private:
  ArchConfig cfg_;
  FilterBank<T> bank_;
  std::vector<nn::ConvBlock<T>> blocks_;
  std::vector<nn::EncoderLayer<T>> layers_;
};

/// Per-image deterministic patch seed derived from the image path.
inline std::uint64_t image_seed(std::string_view path) { return hash_string(path); }

}  // namespace sdaie
