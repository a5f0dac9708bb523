#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "sdaie/common.hpp"

namespace sdaie {

/// RGB image, interleaved rows, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {
    if (h <= 0 || w <= 0) throw Error("Image: dimensions must be positive");
  }

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool empty() const { return data.empty(); }
  bool operator==(const Image&) const = default;
};

inline float quantize8(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f); }

inline cv::Mat to_bgr8(const Image& img) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    auto* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) row[x * 3 + (2 - c)] = static_cast<unsigned char>(quantize8(img.at(y, x, c)));
  }
  return m;
}

/// Converts a decoded OpenCV matrix (gray, BGR or BGRA; 8 or 16 bit) to RGB.
/// Grayscale inputs are replicated to three channels.
inline Image from_cv(const cv::Mat& src) {
  if (src.empty()) throw Error("from_cv: empty matrix");
  cv::Mat f;
  const double scale = src.depth() == CV_16U ? 1.0 / 65535.0 : (src.depth() == CV_8U ? 1.0 / 255.0 : 1.0);
  src.convertTo(f, CV_32F, scale);
  Image img(f.rows, f.cols);
  const int ch = f.channels();
  for (int y = 0; y < f.rows; ++y) {
    const float* row = f.ptr<float>(y);
    for (int x = 0; x < f.cols; ++x) {
      if (ch == 1) {
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[x];
      } else {
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[x * ch + (2 - c)];
      }
    }
  }
  return img;
}

inline Image load_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR);
  if (m.empty()) throw Error("cannot read image '" + path.string() + "'");
  return from_cv(m);
}

/// Writes an 8-bit image; the format follows the file extension.
inline void save_image(const Image& img, const std::filesystem::path& path) {
  if (!cv::imwrite(path.string(), to_bgr8(img))) throw Error("cannot write image '" + path.string() + "'");
}

/// Rounds every sample to the 8-bit grid, as if saved and re-read losslessly.
inline Image quantized(Image img) {
  for (auto& v : img.data) v = quantize8(v) / 255.0f;
  return img;
}

inline void clamp01(Image& img) {
  for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

inline int reflect_index(int i, int n) {
  // symmetric (edge-inclusive) reflection: -1 -> 0, n -> n-1
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace sdaie
