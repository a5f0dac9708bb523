#pragma once

#include <filesystem>
#include <string>

#include "sdaie/sdaie.hpp"

namespace sdaie::testing {

/// Small extractor for fast tests: 16px patches, 4 channels, 10-dim tokens.
inline ArchConfig toy_arch(int patch = 16) {
  ArchConfig a;
  a.patch_size = patch;
  a.train_patches = 2;
  a.channels = 4;
  a.blocks = 3;
  a.pooled_blocks = 2;
  a.encoder_layers = 1;
  a.heads = 2;
  a.ff_width = 16;
  return a;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sdaie_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline DatasetManifest small_suite(const std::string& name, ImageStore& store, std::size_t camera = 24,
                                   std::size_t smooth = 12, std::size_t blocky = 12, int side = 64,
                                   std::uint64_t seed = 1) {
  synth::SuiteOptions opt;
  opt.camera = camera;
  opt.smooth = smooth;
  opt.blocky = blocky;
  opt.side = side;
  opt.seed = seed;
  return synth::write_suite(scratch_dir(name), opt, &store);
}

}  // namespace sdaie::testing
