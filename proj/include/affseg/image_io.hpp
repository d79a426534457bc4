// 8-bit PGM (P5) and PPM (P6) codecs. Label maps store the class index per
// byte with 255 reserved for IGNORE; saliency maps are scaled by 255.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "affseg/tensor.hpp"
#include "affseg/tensor_io.hpp"

namespace affseg {

struct LabelMap {
  static constexpr std::uint8_t kIgnore = 255;

  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int height, int width, std::uint8_t fill = 0)
      : h(height), w(width),
        labels(static_cast<std::size_t>(height) * width, fill) {
    detail::require(height >= 1 && width >= 1, "LabelMap: extents must be >= 1");
  }

  std::uint8_t at(int i, int j) const {
    return labels[static_cast<std::size_t>(i) * w + j];
  }
  std::uint8_t& at(int i, int j) {
    return labels[static_cast<std::size_t>(i) * w + j];
  }
  std::size_t size() const { return labels.size(); }
};

struct SaliencyMap {
  int h = 0;
  int w = 0;
  std::vector<float> values;

  SaliencyMap() = default;
  SaliencyMap(int height, int width, float fill = 0.0f)
      : h(height), w(width),
        values(static_cast<std::size_t>(height) * width, fill) {
    detail::require(height >= 1 && width >= 1,
                    "SaliencyMap: extents must be >= 1");
    detail::require(fill >= 0.0f && fill <= 1.0f,
                    "SaliencyMap: values must lie in [0,1]");
  }

  float at(int i, int j) const {
    return values[static_cast<std::size_t>(i) * w + j];
  }
  float& at(int i, int j) {
    return values[static_cast<std::size_t>(i) * w + j];
  }
  std::size_t size() const { return values.size(); }
};

namespace detail {

inline void write_pnm_header(std::ostream& os, const char* magic, int w, int h) {
  os << magic << "\n" << w << " " << h << "\n255\n";
}

inline int read_pnm_int(std::istream& is) {
  // skips whitespace and '#' comment lines
  while (true) {
    const int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
  int v = 0;
  if (!(is >> v)) throw IoError("pnm: malformed header");
  return v;
}

inline std::vector<std::uint8_t> read_pnm_payload(std::istream& is,
                                                  const char* magic,
                                                  int channels, int& w,
                                                  int& h) {
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (!is || m0 != magic[0] || m1 != magic[1])
    throw IoError(std::string("pnm: expected ") + magic + " file");
  w = read_pnm_int(is);
  h = read_pnm_int(is);
  const int maxval = read_pnm_int(is);
  if (w < 1 || h < 1 || maxval != 255) throw IoError("pnm: unsupported header");
  is.get();  // single whitespace byte before payload
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * channels);
  is.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!is) throw IoError("pnm: truncated payload");
  return bytes;
}

}  // namespace detail

inline void write_labelmap_pgm(const std::filesystem::path& path,
                               const LabelMap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  detail::write_pnm_header(os, "P5", map.w, map.h);
  os.write(reinterpret_cast<const char*>(map.labels.data()),
           static_cast<std::streamsize>(map.labels.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline LabelMap read_labelmap_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  int w = 0, h = 0;
  auto bytes = detail::read_pnm_payload(is, "P5", 1, w, h);
  LabelMap map(h, w);
  map.labels = std::move(bytes);
  return map;
}

inline void write_saliency_pgm(const std::filesystem::path& path,
                               const SaliencyMap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  detail::write_pnm_header(os, "P5", map.w, map.h);
  std::vector<std::uint8_t> bytes(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, map.values[i]));
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline SaliencyMap read_saliency_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  int w = 0, h = 0;
  const auto bytes = detail::read_pnm_payload(is, "P5", 1, w, h);
  SaliencyMap map(h, w);
  for (std::size_t i = 0; i < map.size(); ++i)
    map.values[i] = static_cast<float>(bytes[i]) / 255.0f;
  return map;
}

// grayscale export of one map in [0,1], values scaled by 255 and rounded
inline void write_gray_pgm(const std::filesystem::path& path, const Tensor& map,
                           int h, int w) {
  detail::require(static_cast<std::size_t>(h) * w == map.size(),
                  "write_gray_pgm: extent mismatch");
  SaliencyMap s(h, w);
  for (std::size_t i = 0; i < s.size(); ++i)
    s.values[i] = std::min(1.0f, std::max(0.0f, map[i]));
  write_saliency_pgm(path, s);
}

inline void write_rgb_ppm(const std::filesystem::path& path,
                          const Tensor& image) {
  detail::require(image.rank() == 3 && image.extent(0) == 3,
                  "write_rgb_ppm: need 3 x H x W");
  const int h = image.extent(1), w = image.extent(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  detail::write_pnm_header(os, "P6", w, h);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(h) * w * 3);
  std::size_t k = 0;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) {
        const float v = std::min(1.0f, std::max(0.0f, image.at(c, i, j)));
        bytes[k++] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace affseg
