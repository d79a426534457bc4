// Binary tensor files and plain-text directory manifests.
//
// Tensor file layout: magic "AXT1", u32 little-endian rank, rank u32
// little-endian extents, then f32 little-endian values in row-major order.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "affseg/tensor.hpp"

namespace affseg {

// I/O failures map to exit code 3 at the CLI; argument problems to 2.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("tensor file: truncated header");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write("AXT1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape().dims())
    detail::put_u32(os, static_cast<std::uint32_t>(d));
  static_assert(sizeof(float) == 4);
  // assumes little-endian float layout, which holds on every target we build
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!os) throw IoError("write failed: " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "AXT1", 4) != 0)
    throw IoError("not an AXT1 tensor file: " + path.string());
  const std::uint32_t rank = detail::get_u32(is);
  if (rank > 8) throw IoError("tensor file: unreasonable rank");
  std::vector<int> dims(rank);
  for (auto& d : dims) {
    const std::uint32_t e = detail::get_u32(is);
    if (e == 0 || e > (1u << 24)) throw IoError("tensor file: bad extent");
    d = static_cast<int>(e);
  }
  Shape shape(dims);
  std::vector<float> data(shape.elements());
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!is) throw IoError("tensor file: truncated data: " + path.string());
  try {
    return Tensor(std::move(shape), std::move(data));
  } catch (const std::invalid_argument& e) {
    throw IoError("tensor file " + path.string() + ": " + e.what());
  }
}

// Manifest: one "name path" line per tensor, paths relative to the directory.
inline void write_manifest(
    const std::filesystem::path& dir,
    const std::vector<std::pair<std::string, std::string>>& entries) {
  std::ofstream os(dir / "manifest.txt");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  for (const auto& [name, rel] : entries) os << name << " " << rel << "\n";
  if (!os) throw IoError("manifest write failed in " + dir.string());
}

inline std::vector<std::pair<std::string, std::string>> read_manifest(
    const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw IoError("cannot read manifest in " + dir.string());
  std::vector<std::pair<std::string, std::string>> entries;
  std::string name, rel;
  while (is >> name >> rel) entries.emplace_back(name, rel);
  return entries;
}

}  // namespace affseg
