#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>

#include "sdaie/common.hpp"
#include "sdaie/image.hpp"

namespace sdaie {

inline constexpr int kMinSide = 64;

/// Baseline JPEG encode/decode round trip at the given quality.
inline Image jpeg_compress(const Image& img, int quality) {
  if (quality < 1 || quality > 100) throw Error("jpeg_compress: quality must be an integer in [1, 100]");
  std::vector<unsigned char> buf;
  const std::vector<int> params{cv::IMWRITE_JPEG_QUALITY, quality, cv::IMWRITE_JPEG_OPTIMIZE, 0,
                                cv::IMWRITE_JPEG_PROGRESSIVE, 0};
  if (!cv::imencode(".jpg", to_bgr8(img), buf, params)) throw Error("jpeg_compress: encoding failed");
  cv::Mat decoded = cv::imdecode(buf, cv::IMREAD_COLOR);
  if (decoded.empty()) throw Error("jpeg_compress: decoding failed");
  return from_cv(decoded);
}

/// Separable Gaussian blur, radius ceil(3 sigma), symmetric padding.
inline Image gaussian_blur(const Image& img, double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw Error("gaussian_blur: sigma must be >= 0");
  if (sigma == 0.0) return img;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;

  Image tmp(img.height, img.width), out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * img.at(y, reflect_index(x + i, img.width), c);
        tmp.at(y, x, c) = static_cast<float>(acc);
      }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(reflect_index(y + i, img.height), x, c);
        out.at(y, x, c) = static_cast<float>(acc);
      }
  clamp01(out);
  return out;
}

/// Bilinear resampling to floor(ratio*H) x floor(ratio*W), half-pixel centres.
inline Image downsample(const Image& img, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw Error("downsample: ratio must be in (0, 1]");
  if (ratio == 1.0) return img;
  const int oh = static_cast<int>(std::floor(ratio * img.height));
  const int ow = static_cast<int>(std::floor(ratio * img.width));
  if (oh < kMinSide || ow < kMinSide)
    throw Error("downsample: result " + std::to_string(oh) + "x" + std::to_string(ow) + " is below the 64-pixel patch size");
  Image out(oh, ow);
  const double sy = static_cast<double>(img.height) / oh, sx = static_cast<double>(img.width) / ow;
  for (int y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bot = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  clamp01(out);
  return out;
}

enum class PerturbOp { jpeg, blur, downsample };

inline PerturbOp parse_perturb_op(std::string_view s) {
  if (s == "jpeg") return PerturbOp::jpeg;
  if (s == "blur") return PerturbOp::blur;
  if (s == "down" || s == "downsample") return PerturbOp::downsample;
  throw Error("unknown perturbation '" + std::string(s) + "' (expected jpeg, blur or down)");
}

inline std::string_view perturb_op_name(PerturbOp op) {
  switch (op) {
    case PerturbOp::jpeg: return "jpeg";
    case PerturbOp::blur: return "blur";
    case PerturbOp::downsample: return "down";
  }
  return "?";
}

struct PerturbationSpec {
  PerturbOp op = PerturbOp::jpeg;
  double param = 95;  // quality, sigma or ratio

  void validate() const {
    switch (op) {
      case PerturbOp::jpeg:
        if (param != std::floor(param) || param < 1 || param > 100) throw Error("jpeg quality must be an integer in [1, 100]");
        break;
      case PerturbOp::blur:
        if (!(param >= 0)) throw Error("blur sigma must be >= 0");
        break;
      case PerturbOp::downsample:
        if (!(param > 0 && param <= 1)) throw Error("downsample ratio must be in (0, 1]");
        break;
    }
  }

  Image apply(const Image& img) const {
    validate();
    switch (op) {
      case PerturbOp::jpeg: return jpeg_compress(img, static_cast<int>(param));
      case PerturbOp::blur: return gaussian_blur(img, param);
      case PerturbOp::downsample: return downsample(img, param);
    }
    return img;
  }

  std::string label() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%g", std::string(perturb_op_name(op)).c_str(), param);
    return buf;
  }
};

/// Training-time augmentation draw. Each operator fires with probability 0.5;
/// its parameter is always drawn so the stream layout does not depend on
/// which operators fire.
struct AugmentDraw {
  bool jpeg = false;
  int quality = 100;
  bool down = false;
  double ratio = 1.0;
  bool blur = false;
  double sigma = 0.0;
};

inline AugmentDraw sample_augment(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xa097));
  AugmentDraw d;
  d.jpeg = rng.uniform() < 0.5;
  d.quality = static_cast<int>(rng.integer(90, 100));
  d.down = rng.uniform() < 0.5;
  d.ratio = rng.uniform(0.25, 1.0);
  d.blur = rng.uniform() < 0.5;
  d.sigma = rng.uniform(0.0, 1.0);
  return d;
}

/// Applies a draw in the order jpeg -> downsample -> blur. The downsampling
/// ratio is raised where needed so neither side drops below 64 pixels.
inline Image apply_augment(const Image& img, const AugmentDraw& d) {
  Image out = img;
  if (d.jpeg) out = jpeg_compress(out, d.quality);
  if (d.down) {
    const double floor_ratio = static_cast<double>(kMinSide) / std::min(out.height, out.width);
    const double r = std::max(d.ratio, floor_ratio);
    if (r < 1.0) out = downsample(out, std::min(1.0, r + 1e-12));
  }
  if (d.blur) out = gaussian_blur(out, d.sigma);
  return out;
}

inline Image random_augment(const Image& img, std::uint64_t seed) { return apply_augment(img, sample_augment(seed)); }

}  // namespace sdaie
