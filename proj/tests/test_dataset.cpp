#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "sdaie/dataset.hpp"

using namespace sdaie;

namespace {

const char* kFullExif =
    R"({"Flash":"No Flash","Make":"Canon","MeteringMode":"Pattern","Model":"EOS","SceneCaptureType":"Standard",)"
    R"("ExposureMode":"Auto","WhiteBalanceMode":"Auto","ExposureBiasValue":"0 EV","ISOSpeedRatings":"100",)"
    R"("ApertureValue":"f/2.8","ExposureTime":"1/100 s","F-Number":"f/2.8","FocalLength":"35 mm","ShutterSpeedValue":"1/100"})";

std::string line(const std::string& path, const std::string& label, bool full = true, bool drop_flash = false) {
  auto j = nlohmann::json{{"image_path", path}, {"label", label}, {"source", "s"}};
  if (full) {
    auto exif = nlohmann::json::parse(kFullExif);
    if (drop_flash) exif.erase("Flash");
    j["exif"] = exif;
  }
  return j.dump();
}

DatasetManifest from_text(const std::string& text) {
  std::istringstream in(text);
  return parse_manifest(in, "/data");
}

}  // namespace

TEST(Manifest, ThreeValidLines) {
  auto m = from_text(line("a.png", "photographic") + "\n" + line("b.png", "generated", false) + "\n\n" +
                     line("/abs/c.png", "photographic") + "\n");
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m[0].resolved, std::filesystem::path("/data/a.png"));
  EXPECT_EQ(m[2].resolved, std::filesystem::path("/abs/c.png"));
  EXPECT_EQ(m[1].label, Label::generated);
  EXPECT_FALSE(m[1].exif.has_value());
  EXPECT_EQ(m.count(Label::photographic), 2u);
}

TEST(Manifest, DuplicatePathRejected) {
  EXPECT_THROW(from_text(line("a.png", "photographic") + "\n" + line("a.png", "generated")), Error);
}

TEST(Manifest, MissingLabelNamesFieldAndLine) {
  try {
    from_text(line("a.png", "photographic") + "\n" + R"({"image_path":"b.png"})");
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("label"), std::string::npos);
    EXPECT_NE(msg.find("line 2"), std::string::npos);
  }
}

TEST(Manifest, MalformedJsonAndBadLabel) {
  EXPECT_THROW(from_text("{not json"), Error);
  EXPECT_THROW(from_text(line("a.png", "fake")), Error);
}

TEST(Manifest, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "sdaie_manifest_rt";
  std::filesystem::remove_all(dir);
  auto m = from_text(line("a.png", "photographic") + "\n" + line("b.png", "generated", false));
  save_manifest(m, dir / "m.jsonl");
  auto back = load_manifest(dir / "m.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].exif, m[0].exif);
  EXPECT_EQ(back[1].label, Label::generated);
  EXPECT_EQ(back[0].resolved, dir / "a.png");
  std::filesystem::remove_all(dir);
}

TEST(FilterComplete, Examples) {
  auto m = from_text(line("a.png", "photographic", true, true) + "\n" + line("b.png", "photographic"));
  auto f = filter_complete(m);
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].image_path, "b.png");
}

TEST(FilterComplete, MixedSetOracleAndIdempotence) {
  std::string text;
  std::size_t expected = 0;
  for (int i = 0; i < 10; ++i) {
    const bool complete = i % 5 == 0 || i % 5 == 3;  // 4 of 10
    const bool has_exif = i % 3 != 1;
    text += line("p" + std::to_string(i) + ".png", "photographic", has_exif, !complete) + "\n";
    expected += complete && has_exif;
  }
  auto m = from_text(text);
  std::size_t oracle = 0;
  for (const auto& e : m.entries) {
    bool all = e.exif.has_value();
    for (std::size_t t = 0; all && t < kNumTags; ++t) all = e.exif->has(t);
    oracle += all;
  }
  auto f = filter_complete(m);
  EXPECT_EQ(f.size(), oracle);
  EXPECT_EQ(f.size(), expected);
  EXPECT_EQ(filter_complete(f).size(), f.size());
}

TEST(SampleIndices, Deterministic) {
  EXPECT_EQ(sample_indices(100, 10, 42), sample_indices(100, 10, 42));
  EXPECT_NE(sample_indices(100, 10, 42), sample_indices(100, 10, 43));
}

TEST(SampleIndices, FullSizeIsPermutation) {
  auto idx = sample_indices(50, 50, 7);
  std::set<std::size_t> s(idx.begin(), idx.end());
  EXPECT_EQ(s.size(), 50u);
  EXPECT_EQ(*s.rbegin(), 49u);
  EXPECT_THROW(sample_indices(5, 6, 0), Error);
}

TEST(SampleIndices, InclusionFrequencyUniform) {
  const std::size_t n = 20, k = 5, draws = 1000;
  for (std::uint64_t base : {1ull, 1000003ull}) {
    std::vector<int> hits(n, 0);
    for (std::size_t d = 0; d < draws; ++d)
      for (auto i : sample_indices(n, k, mix_seed(base, d))) ++hits[i];
    const double p = static_cast<double>(k) / n;
    const double mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
    for (auto h : hits) EXPECT_LE(std::abs(h - mean), 3.5 * sd) << h;
  }
}

TEST(EnumeratePairs, Counts) {
  EXPECT_EQ(enumerate_pairs(2), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}}));
  EXPECT_EQ(enumerate_pairs(4).size(), 6u);
  EXPECT_EQ(enumerate_pairs(64).size(), 2016u);
  for (std::size_t b = 2; b < 30; ++b) EXPECT_EQ(enumerate_pairs(b).size(), b * (b - 1) / 2);
  EXPECT_THROW(enumerate_pairs(1), Error);
}

TEST(ImageStore, GrayscaleReplicatedAndMissingFile) {
  const auto dir = std::filesystem::temp_directory_path() / "sdaie_store";
  std::filesystem::create_directories(dir);
  cv::Mat g(8, 6, CV_8UC1, cv::Scalar(51));
  cv::imwrite((dir / "g.png").string(), g);
  ImageStore store;
  const auto& img = store.get(dir / "g.png");
  EXPECT_EQ(img.height, 8);
  EXPECT_EQ(img.width, 6);
  for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(img.at(3, 2, c), 0.2f);
  EXPECT_THROW(store.get(dir / "nope.png"), Error);
  std::filesystem::remove_all(dir);
}
