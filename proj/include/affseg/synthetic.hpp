// Synthetic shape dataset: colored circles, squares and triangles on a
// textured background, with image-level labels, held-out true masks, and a
// noisy saliency oracle standing in for an off-the-shelf saliency model.
// Generation is deterministic per (seed, sample index), so prefixes of a
// dataset are stable when n_samples changes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "affseg/image_io.hpp"
#include "affseg/rng.hpp"
#include "affseg/tensor.hpp"

namespace affseg {

constexpr int kNumShapeClasses = 3;  // 1 = circle, 2 = square, 3 = triangle

struct DatasetSpec {
  int n_samples = 200;
  int height = 64;
  int width = 64;
  int min_shapes = 1;
  int max_shapes = 3;
  float background_noise = 0.05f;  // texture amplitude
  // saliency corruption
  int corruption_radius_min = 1;  // boundary dilation/erosion, px
  int corruption_radius_max = 3;
  float blur_sigma = 1.5f;
  float salt_rate = 0.02f;
  // appearance
  float color_jitter = 0.12f;     // per-instance channel jitter
  float shade_strength = 0.6f;    // intensity falloff across each shape
  std::uint64_t seed = 0;

  void check() const {
    detail::require(n_samples >= 1 && height >= 8 && width >= 8,
                    "DatasetSpec: bad extents");
    detail::require(min_shapes >= 1 && max_shapes >= min_shapes &&
                        max_shapes <= 3,
                    "DatasetSpec: shapes per image must be within 1..3");
    detail::require(corruption_radius_min >= 0 &&
                        corruption_radius_max >= corruption_radius_min &&
                        corruption_radius_max <= 3,
                    "DatasetSpec: corruption radius must be within 0..3");
    detail::require(blur_sigma >= 0.0f && salt_rate >= 0.0f && salt_rate <= 1.0f,
                    "DatasetSpec: bad corruption parameters");
    detail::require(shade_strength >= 0.0f && shade_strength < 1.0f &&
                        color_jitter >= 0.0f,
                    "DatasetSpec: bad appearance parameters");
  }
};

struct SyntheticSample {
  Tensor image;                 // 3 x H x W, values in [0,1]
  LabelMap gt_mask;             // evaluation only
  std::vector<int> image_labels;  // ascending class ids present in gt_mask
  SaliencyMap oracle_saliency;  // corrupted foreground mask
};

namespace detail {

struct ShapeSpot {
  int cls = 0;
  int cy = 0, cx = 0, size = 0;
};

inline bool inside_shape(const ShapeSpot& s, int y, int x) {
  const int dy = y - s.cy, dx = x - s.cx;
  switch (s.cls) {
    case 1:  // circle
      return dy * dy + dx * dx <= s.size * s.size;
    case 2:  // axis-aligned square
      return std::abs(dy) <= s.size && std::abs(dx) <= s.size;
    default:  // up-pointing isoceles triangle
      if (dy < -s.size || dy > s.size) return false;
      return 2 * std::abs(dx) <= dy + s.size;
  }
}

inline void gaussian_blur_inplace(SaliencyMap& m, float sigma) {
  if (sigma <= 0.0f) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0f * sigma)));
  std::vector<float> kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i)
    kernel[i + radius] = std::exp(-0.5f * i * i / (sigma * sigma));

  SaliencyMap tmp(m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      float acc = 0.0f, norm = 0.0f;
      for (int k = -radius; k <= radius; ++k) {
        const int xx = x + k;
        if (xx < 0 || xx >= m.w) continue;
        acc += kernel[k + radius] * m.at(y, xx);
        norm += kernel[k + radius];
      }
      tmp.at(y, x) = acc / norm;
    }
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      float acc = 0.0f, norm = 0.0f;
      for (int k = -radius; k <= radius; ++k) {
        const int yy = y + k;
        if (yy < 0 || yy >= m.h) continue;
        acc += kernel[k + radius] * tmp.at(yy, x);
        norm += kernel[k + radius];
      }
      m.at(y, x) = acc / norm;
    }
}

inline void morph_inplace(SaliencyMap& m, int radius, bool dilate) {
  if (radius <= 0) return;
  SaliencyMap src = m;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      float best = dilate ? 0.0f : 1.0f;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dy * dy + dx * dx > radius * radius) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= m.h || xx < 0 || xx >= m.w) continue;
          const float v = src.at(yy, xx);
          best = dilate ? std::max(best, v) : std::min(best, v);
        }
      m.at(y, x) = best;
    }
}

}  // namespace detail

inline SyntheticSample generate_sample(const DatasetSpec& spec, int index) {
  spec.check();
  Rng rng(spec.seed * 0x9e3779b97f4a7c15ull + 0xd1b54a32d192ed03ull +
          static_cast<std::uint64_t>(index));
  const int h = spec.height, w = spec.width;

  SyntheticSample s;
  s.gt_mask = LabelMap(h, w);
  s.image = Tensor(Shape{3, h, w});

  // background: near-constant gray with a faint diagonal gradient; per-image
  // tint is kept small so the class color signal survives global pooling
  float base[3];
  for (float& b : base) b = 0.55f + rng.uniform_range(-0.02f, 0.02f);
  const float grad = rng.uniform_range(-0.04f, 0.04f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float g = grad * (static_cast<float>(y + x) / (h + w) - 0.5f);
      for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = base[c] + g;
    }

  // shapes: distinct base color per class, per-instance jitter and a linear
  // intensity falloff so activation maps are graded rather than flat
  static constexpr float kBaseColor[3][3] = {
      {0.80f, 0.22f, 0.20f},  // circle: red
      {0.18f, 0.70f, 0.25f},  // square: green
      {0.20f, 0.32f, 0.80f},  // triangle: blue
  };
  const int want = rng.uniform_int(spec.min_shapes, spec.max_shapes);
  for (int k = 0; k < want; ++k) {
    const int cls = rng.uniform_int(1, kNumShapeClasses);
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      detail::ShapeSpot spot;
      spot.cls = cls;
      spot.size = rng.uniform_int(5, std::max(6, std::min(h, w) / 6));
      spot.cy = rng.uniform_int(spot.size, h - 1 - spot.size);
      spot.cx = rng.uniform_int(spot.size, w - 1 - spot.size);

      bool overlaps = false;
      for (int y = spot.cy - spot.size; y <= spot.cy + spot.size && !overlaps; ++y)
        for (int x = spot.cx - spot.size; x <= spot.cx + spot.size; ++x)
          if (detail::inside_shape(spot, y, x) && s.gt_mask.at(y, x) != 0) {
            overlaps = true;
            break;
          }
      if (overlaps) continue;  // retry elsewhere; give up after 100 tries

      float color[3];
      for (int c = 0; c < 3; ++c)
        color[c] = std::clamp(kBaseColor[cls - 1][c] +
                                  rng.uniform_range(-spec.color_jitter,
                                                    spec.color_jitter),
                              0.05f, 0.95f);
      const float dir_y = rng.uniform_range(-1.0f, 1.0f);
      const float dir_x = rng.uniform_range(-1.0f, 1.0f);
      const float dir_norm =
          std::max(1e-3f, std::sqrt(dir_y * dir_y + dir_x * dir_x));

      for (int y = spot.cy - spot.size; y <= spot.cy + spot.size; ++y)
        for (int x = spot.cx - spot.size; x <= spot.cx + spot.size; ++x) {
          if (!detail::inside_shape(spot, y, x)) continue;
          s.gt_mask.at(y, x) = static_cast<std::uint8_t>(cls);
          const float t = 0.5f + 0.5f *
                                     ((y - spot.cy) * dir_y + (x - spot.cx) * dir_x) /
                                     (dir_norm * spot.size);
          const float shade = 1.0f - spec.shade_strength * std::clamp(t, 0.0f, 1.0f);
          for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = color[c] * shade;
        }
      placed = true;
    }
  }

  // texture noise over everything, then clamp to [0,1]
  for (std::size_t i = 0; i < s.image.size(); ++i)
    s.image[i] = std::clamp(
        s.image[i] + rng.uniform_range(-spec.background_noise,
                                       spec.background_noise),
        0.0f, 1.0f);

  s.image_labels.clear();
  for (int cls = 1; cls <= kNumShapeClasses; ++cls)
    for (std::size_t i = 0; i < s.gt_mask.size(); ++i)
      if (s.gt_mask.labels[i] == cls) {
        s.image_labels.push_back(cls);
        break;
      }

  // saliency oracle: true foreground, then boundary morphing, blur and salt
  s.oracle_saliency = SaliencyMap(h, w);
  for (std::size_t i = 0; i < s.gt_mask.size(); ++i)
    s.oracle_saliency.values[i] = s.gt_mask.labels[i] != 0 ? 1.0f : 0.0f;
  const int radius =
      rng.uniform_int(spec.corruption_radius_min, spec.corruption_radius_max);
  detail::morph_inplace(s.oracle_saliency, radius, rng.coin());
  detail::gaussian_blur_inplace(s.oracle_saliency, spec.blur_sigma);
  for (std::size_t i = 0; i < s.oracle_saliency.size(); ++i) {
    if (rng.uniform() < spec.salt_rate) s.oracle_saliency.values[i] = 1.0f;
    s.oracle_saliency.values[i] = std::clamp(s.oracle_saliency.values[i], 0.0f, 1.0f);
  }
  return s;
}

inline std::vector<SyntheticSample> generate_dataset(const DatasetSpec& spec) {
  spec.check();
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i)
    out.push_back(generate_sample(spec, i));
  return out;
}

}  // namespace affseg
