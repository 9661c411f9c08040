#pragma once

// Shared persistence helpers: little-endian float32 blobs and JSON metadata.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajdiff/common.hpp"

namespace trajdiff {

using json = nlohmann::json;

namespace io {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) |
         (v >> 24);
}

inline void write_f32(const std::filesystem::path& path,
                      const std::vector<float>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Errc::io_error, "cannot open " + path.string());
  for (float f : data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    bits = to_le(bits);
    out.write(reinterpret_cast<const char*>(&bits), 4);
  }
  require(out.good(), Errc::io_error, "short write to " + path.string());
}

// Returns the full file content; the caller validates the element count.
inline std::vector<float> read_f32(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  require(in.good(), Errc::missing_file, path.string());
  const std::streamoff bytes = in.tellg();
  require(bytes % 4 == 0, Errc::row_count_mismatch,
          path.string() + " is not a float32 array");
  in.seekg(0);
  std::vector<float> data(static_cast<size_t>(bytes / 4));
  for (auto& f : data) {
    std::uint32_t bits;
    in.read(reinterpret_cast<char*>(&bits), 4);
    bits = to_le(bits);
    std::memcpy(&f, &bits, 4);
  }
  require(in.good(), Errc::io_error, "short read from " + path.string());
  return data;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Errc::io_error, "cannot open " + path.string());
  out << j.dump(2) << "\n";
  require(out.good(), Errc::io_error, "short write to " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), Errc::missing_file, path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw Error(Errc::io_error, path.string() + ": " + e.what());
  }
  return j;
}

// Atomic-ish file replacement: write to a sibling temp file, then rename.
template <typename WriteFn>
void write_atomic(const std::filesystem::path& path, WriteFn&& fn) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  fn(tmp);
  std::filesystem::rename(tmp, path);
}

inline std::vector<float> to_f32(const Vec& v) {
  std::vector<float> out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>(v[i]);
  return out;
}

inline json vec_to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vec vec_from_json(const json& a) {
  Vec v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i];
  return v;
}

}  // namespace io
}  // namespace trajdiff
