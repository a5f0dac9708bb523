#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sdaie/augment.hpp"
#include "sdaie/common.hpp"
#include "sdaie/dataset.hpp"
#include "sdaie/image.hpp"

// Toy stand-ins for photographs and generator output. Camera-like images go
// through a Bayer mosaic, signal-dependent noise and demosaicing, with EXIF
// tags tied to the noise and blur settings. Generated-like images are
// smoothed noise fields without EXIF.
namespace sdaie::synth {

struct CameraProfile {
  const char* make;
  const char* model;
  int cfa;             // 0 RGGB, 1 BGGR, 2 GRBG, 3 GBRG
  double noise_gain;   // shot-noise scale at ISO 100
  double read_noise;
  std::array<double, 3> wb;
  std::array<double, 3> focal;
  const char* metering;
};

inline const std::array<CameraProfile, 4>& cameras() {
  static const std::array<CameraProfile, 4> c{{
      {"Canon", "Canon EOS 5D Mark II", 0, 1.0, 0.002, {1.00, 1.00, 1.05}, {24, 50, 105}, "Pattern"},
      {"NIKON CORPORATION", "NIKON D700", 1, 1.4, 0.003, {1.04, 1.00, 0.96}, {28, 50, 85}, "Center-weighted average"},
      {"Apple", "iPhone 6", 2, 2.6, 0.004, {1.02, 1.00, 1.00}, {4.15, 4.15, 4.15}, "Pattern"},
      {"SONY", "ILCE-7M3", 3, 0.8, 0.0015, {0.97, 1.00, 1.06}, {35, 55, 90}, "Spot"},
  }};
  return c;
}

inline constexpr std::array<int, 6> kIsoSteps{100, 200, 400, 800, 1600, 3200};
inline constexpr std::array<double, 6> kFStops{1.8, 2.8, 4.0, 5.6, 8.0, 11.0};
inline constexpr std::array<const char*, 7> kBias{"-1", "-2/3", "-1/3", "0", "1/3", "2/3", "1"};

/// Smooth random scene: low-resolution colour grid, bilinearly enlarged,
/// with a few hard-edged shapes and a soft sinusoid.
inline Image scene(Rng& rng, int side) {
  const int g = 5;
  std::vector<double> grid(static_cast<std::size_t>(g * g * 3));
  for (auto& v : grid) v = rng.uniform(0.1, 0.9);
  Image img(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double fy = static_cast<double>(y) / (side - 1) * (g - 1), fx = static_cast<double>(x) / (side - 1) * (g - 1);
      const int y0 = std::min(static_cast<int>(fy), g - 2), x0 = std::min(static_cast<int>(fx), g - 2);
      const double wy = fy - y0, wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        auto at = [&](int yy, int xx) { return grid[static_cast<std::size_t>((yy * g + xx) * 3 + c)]; };
        img.at(y, x, c) = static_cast<float>((1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
                                             wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1)));
      }
    }
  const int shapes = static_cast<int>(rng.integer(1, 4));
  for (int s = 0; s < shapes; ++s) {
    const double cy = rng.uniform(0, side), cx = rng.uniform(0, side), r = rng.uniform(side * 0.08, side * 0.3);
    const bool disc = rng.uniform() < 0.5;
    std::array<double, 3> col{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const bool in = disc ? (y - cy) * (y - cy) + (x - cx) * (x - cx) < r * r
                             : std::abs(y - cy) < r && std::abs(x - cx) < r * 0.7;
        if (in)
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(col[static_cast<std::size_t>(c)]);
      }
  }
  const double fy = rng.uniform(0.01, 0.08), fx = rng.uniform(0.01, 0.08), ph = rng.uniform(0, 2 * std::numbers::pi);
  const double amp = rng.uniform(0.0, 0.08);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double d = amp * std::sin(2 * std::numbers::pi * (fy * y + fx * x) + ph);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(std::clamp(img.at(y, x, c) + d, 0.0, 1.0));
    }
  return img;
}

inline int cfa_channel(int cfa, int y, int x) {
  static constexpr int layout[4][4] = {{0, 1, 1, 2}, {2, 1, 1, 0}, {1, 0, 2, 1}, {1, 2, 0, 1}};
  return layout[cfa][(y & 1) * 2 + (x & 1)];
}

/// Bilinear demosaic: each missing channel is the mean of the nearest
/// same-colour samples in the 3x3 neighbourhood.
inline Image demosaic(const std::vector<double>& raw, int side, int cfa) {
  Image out(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      std::array<double, 3> sum{}, cnt{};
      const int own = cfa_channel(cfa, y, x);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = reflect_index(y + dy, side), xx = reflect_index(x + dx, side);
          const int c = cfa_channel(cfa, yy, xx);
          if (c == own && (dy || dx)) continue;
          sum[static_cast<std::size_t>(c)] += raw[static_cast<std::size_t>(yy * side + xx)];
          cnt[static_cast<std::size_t>(c)] += 1;
        }
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = static_cast<float>(c == own ? raw[static_cast<std::size_t>(y * side + x)]
                                                      : sum[static_cast<std::size_t>(c)] / std::max(1.0, cnt[static_cast<std::size_t>(c)]));
    }
  return out;
}

struct Sample {
  Image image;
  std::map<std::string, std::string> exif;  // empty for generated-like images
};

inline Sample camera_image(std::uint64_t seed, int side = 128) {
  Rng rng(mix_seed(seed, 0xca3e));
  const auto& cam = cameras()[static_cast<std::size_t>(rng.below(cameras().size()))];
  const int iso_i = static_cast<int>(rng.below(kIsoSteps.size()));
  const int f_i = static_cast<int>(rng.below(kFStops.size()));
  const int bias_i = static_cast<int>(rng.below(kBias.size()));
  const int iso = kIsoSteps[static_cast<std::size_t>(iso_i)];
  const double fnum = kFStops[static_cast<std::size_t>(f_i)];
  const double focal = cam.focal[static_cast<std::size_t>(rng.below(3))];
  const bool flash = rng.uniform() < (iso >= 800 ? 0.6 : 0.15);
  const bool manual = rng.uniform() < 0.3;
  const bool wb_manual = rng.uniform() < 0.2;
  const double exposure = 1.0 / (60.0 * std::exp2(rng.integer(0, 5))) * (100.0 / iso) * fnum * fnum / 4.0;

  Image img = gaussian_blur(scene(rng, side), 0.3 + 1.6 / fnum);
  const double gain = std::exp2((bias_i - 3) / 3.0 * 0.5);
  std::vector<double> raw(static_cast<std::size_t>(side * side));
  const double shot = 4e-4 * cam.noise_gain * iso / 100.0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const int c = cfa_channel(cam.cfa, y, x);
      const double s = std::clamp(img.at(y, x, c) * gain / cam.wb[static_cast<std::size_t>(c)], 0.0, 1.0);
      const double sd = std::sqrt(shot * s + cam.read_noise * cam.read_noise);
      raw[static_cast<std::size_t>(y * side + x)] = std::clamp(s + sd * rng.normal(), 0.0, 1.0);
    }
  Image out = demosaic(raw, side, cam.cfa);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = static_cast<float>(std::pow(std::clamp(out.at(y, x, c) * cam.wb[static_cast<std::size_t>(c)], 0.0, 1.0), 1 / 2.2));

  char buf[64];
  Sample s{std::move(out), {}};
  s.exif["Flash"] = flash ? "Flash fired" : "No Flash";
  s.exif["Make"] = cam.make;
  s.exif["Model"] = cam.model;
  s.exif["MeteringMode"] = cam.metering;
  s.exif["SceneCaptureType"] = iso >= 1600 ? "Night scene" : (focal >= 85 ? "Portrait" : "Standard");
  s.exif["ExposureMode"] = manual ? "Manual" : "Auto";
  s.exif["WhiteBalanceMode"] = wb_manual ? "Manual" : "Auto";
  s.exif["ExposureBiasValue"] = std::string(kBias[static_cast<std::size_t>(bias_i)]) + " EV";
  s.exif["ISOSpeedRatings"] = std::to_string(iso);
  std::snprintf(buf, sizeof buf, "apex %.4f", 2.0 * std::log2(fnum));
  s.exif["ApertureValue"] = buf;
  std::snprintf(buf, sizeof buf, "%.6g", exposure);
  s.exif["ExposureTime"] = buf;
  std::snprintf(buf, sizeof buf, "f/%.1f", fnum);
  s.exif["F-Number"] = buf;
  std::snprintf(buf, sizeof buf, "%.2f mm", focal);
  s.exif["FocalLength"] = buf;
  std::snprintf(buf, sizeof buf, "%.6g s", exposure);
  s.exif["ShutterSpeedValue"] = buf;
  return s;
}

enum class Family { smooth, blocky };

inline std::string_view family_name(Family f) { return f == Family::smooth ? "gen_smooth" : "gen_blocky"; }

/// Family smooth: Gaussian-smoothed colour noise. Family blocky: coarse noise
/// enlarged by pixel replication, then lightly blurred.
inline Sample generated_image(std::uint64_t seed, Family family, int side = 128) {
  Rng rng(mix_seed(seed, family == Family::smooth ? 0x5300 : 0xb10c));
  Image img(side, side);
  if (family == Family::smooth) {
    for (auto& v : img.data) v = static_cast<float>(rng.normal());
    img = [&] {
      Image tmp = img;
      for (auto& v : tmp.data) v = static_cast<float>(0.5 + 0.5 * std::tanh(v));
      return gaussian_blur(tmp, rng.uniform(1.5, 4.0));
    }();
  } else {
    const int f = rng.uniform() < 0.5 ? 2 : 4;
    const int small = (side + f - 1) / f;
    std::vector<float> coarse(static_cast<std::size_t>(small * small * 3));
    for (auto& v : coarse) v = static_cast<float>(rng.uniform(0.15, 0.85));
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = coarse[static_cast<std::size_t>(((y / f) * small + x / f) * 3 + c)];
    img = gaussian_blur(img, rng.uniform(0.4, 0.9));
  }
  // Stretch each channel to a random mean and contrast.
  for (int c = 0; c < 3; ++c) {
    double m = 0, sq = 0;
    const double n = static_cast<double>(side) * side;
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) m += img.at(y, x, c);
    m /= n;
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) sq += (img.at(y, x, c) - m) * (img.at(y, x, c) - m);
    const double sd = std::sqrt(sq / n) + 1e-9;
    const double target_m = rng.uniform(0.3, 0.7), target_sd = rng.uniform(0.08, 0.2);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        img.at(y, x, c) = static_cast<float>(std::clamp(target_m + (img.at(y, x, c) - m) / sd * target_sd, 0.0, 1.0));
  }
  return {std::move(img), {}};
}

struct SuiteOptions {
  std::size_t camera = 200;
  std::size_t smooth = 100;
  std::size_t blocky = 100;
  int side = 128;
  std::uint64_t seed = 0;
};

/// Writes PNGs under `dir` plus `dir/manifest.jsonl`; images are also
/// placed in `store` when given so callers can skip decoding.
inline DatasetManifest write_suite(const std::filesystem::path& dir, const SuiteOptions& opt, ImageStore* store = nullptr) {
  std::filesystem::create_directories(dir / "camera");
  std::filesystem::create_directories(dir / "generated");
  DatasetManifest m;
  char name[64];
  auto emit = [&](const std::string& rel, Sample s, Label label, std::string source) {
    const auto path = dir / rel;
    save_image(s.image, path);
    ManifestEntry e;
    e.image_path = rel;
    e.resolved = path;
    e.label = label;
    e.source = std::move(source);
    if (!s.exif.empty()) {
      e.raw_exif = s.exif;
      e.exif = parse_exif(s.exif).record;
    }
    if (store) store->put(path, quantized(s.image));
    m.entries.push_back(std::move(e));
  };
  for (std::size_t i = 0; i < opt.camera; ++i) {
    std::snprintf(name, sizeof name, "camera/cam_%05zu.png", i);
    emit(name, camera_image(mix_seed(opt.seed, 1000000 + i), opt.side), Label::photographic, "camera");
  }
  for (std::size_t i = 0; i < opt.smooth; ++i) {
    std::snprintf(name, sizeof name, "generated/smooth_%05zu.png", i);
    emit(name, generated_image(mix_seed(opt.seed, 2000000 + i), Family::smooth, opt.side), Label::generated,
         std::string(family_name(Family::smooth)));
  }
  for (std::size_t i = 0; i < opt.blocky; ++i) {
    std::snprintf(name, sizeof name, "generated/blocky_%05zu.png", i);
    emit(name, generated_image(mix_seed(opt.seed, 3000000 + i), Family::blocky, opt.side), Label::generated,
         std::string(family_name(Family::blocky)));
  }
  save_manifest(m, dir / "manifest.jsonl");
  return m;
}

}  // namespace sdaie::synth
