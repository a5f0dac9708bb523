#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdaie/common.hpp"
#include "sdaie/optim.hpp"

// weights.bin layout (all integers little-endian):
//   "SDAIEW01"                      8-byte magic
//   u32 tensor_count
//   per tensor: u32 name_len, name bytes, u32 rows, u32 cols, u64 offset
//   float32 data, contiguous; `offset` counts floats from the data start
namespace sdaie {

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw Error("unexpected end of binary file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw Error("unexpected end of binary file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }
inline std::string get_string(std::istream& is, std::size_t max_len = 1 << 20) {
  const auto n = get_u32(is);
  if (n > max_len) throw Error("corrupt string length in binary file");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw Error("unexpected end of binary file");
  return s;
}

inline void write_floats(std::ostream& os, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_f32(os, data[i]);
  }
}
inline void read_floats(std::istream& is, float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float))))
      throw Error("unexpected end of binary file");
  } else {
    for (std::size_t i = 0; i < n; ++i) data[i] = get_f32(is);
  }
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

}  // namespace io

inline constexpr char kWeightsMagic[8] = {'S', 'D', 'A', 'I', 'E', 'W', '0', '1'};

template <typename T>
void save_weights(const ParamList<T>& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write '" + path.string() + "'");
  os.write(kWeightsMagic, 8);
  io::put_u32(os, static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const auto* p : params) {
    io::put_string(os, p->name);
    io::put_u32(os, static_cast<std::uint32_t>(p->value.rows()));
    io::put_u32(os, static_cast<std::uint32_t>(p->value.cols()));
    io::put_u64(os, offset);
    offset += static_cast<std::uint64_t>(p->value.size());
  }
  std::vector<float> buf;
  for (const auto* p : params) {
    buf.resize(static_cast<std::size_t>(p->value.size()));
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(p->value.data()[i]);
    io::write_floats(os, buf.data(), buf.size());
  }
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

/// Loads tensors by name. Every parameter must be present with a matching
/// shape; tensors in the file that the model does not use are ignored.
template <typename T>
void load_weights(const ParamList<T>& params, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kWeightsMagic, 8) != 0) throw Error("'" + path.string() + "' is not a weights file");
  struct Entry {
    std::uint32_t rows, cols;
    std::uint64_t offset;
  };
  std::map<std::string, Entry> index;
  const auto count = io::get_u32(is);
  std::uint64_t total = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = io::get_string(is);
    Entry e{io::get_u32(is), io::get_u32(is), io::get_u64(is)};
    total = std::max(total, e.offset + static_cast<std::uint64_t>(e.rows) * e.cols);
    index.emplace(std::move(name), e);
  }
  std::vector<float> data(total);
  io::read_floats(is, data.data(), data.size());
  for (auto* p : params) {
    auto it = index.find(p->name);
    if (it == index.end()) throw Error("weights file lacks tensor '" + p->name + "'");
    if (it->second.rows != p->value.rows() || it->second.cols != p->value.cols())
      throw Error("shape mismatch for tensor '" + p->name + "'");
    for (Eigen::Index i = 0; i < p->value.size(); ++i)
      p->value.data()[i] = static_cast<T>(data[it->second.offset + static_cast<std::uint64_t>(i)]);
  }
}

}  // namespace sdaie
