// Pseudo ground truth machinery: segmentation PGT from CAM + saliency seeds
// with IGNORE conflict handling, the staged saliency PGT update, and an exact
// dense binary mean-field CRF for desk-scale images.
#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "affseg/cam.hpp"
#include "affseg/image_io.hpp"
#include "affseg/tensor.hpp"

namespace affseg {

struct ThresholdConfig {
  float cam_thresh = 0.2f;
  float sal_thresh = 0.06f;

  void check() const {
    detail::require(cam_thresh > 0.0f && cam_thresh < 1.0f &&
                        sal_thresh > 0.0f && sal_thresh < 1.0f,
                    "ThresholdConfig: thresholds must lie in (0,1)");
  }
};

struct CrfParams {
  int iterations = 5;
  float spatial_sigma = 3.0f;            // px
  float bilateral_spatial_sigma = 30.0f; // px
  float bilateral_range_sigma = 10.0f;   // 8-bit intensity units
  float spatial_weight = 1.0f;
  float bilateral_weight = 1.0f;

  void check() const {
    detail::require(iterations >= 0, "CrfParams: iterations must be >= 0");
    detail::require(spatial_sigma > 0.0f && bilateral_spatial_sigma > 0.0f &&
                        bilateral_range_sigma > 0.0f,
                    "CrfParams: sigmas must be positive");
  }
};

// Seed labelling rule per pixel, with c* the best present class by CAM score
// (ties broken toward the lowest class index):
//   FG only -> c*, BG only -> background, both or neither -> IGNORE.
inline LabelMap generate_seg_pgt(const CamStack& cams, const SaliencyMap& sal,
                                 const std::vector<int>& present_classes,
                                 const ThresholdConfig& t) {
  detail::require(cams.normalized, "generate_seg_pgt: CAM must be normalized");
  detail::require(cams.height() == sal.h && cams.width() == sal.w,
                  "generate_seg_pgt: extent mismatch");
  t.check();

  std::vector<int> classes;  // ascending, deduplicated
  for (int c = 1; c <= cams.classes(); ++c)
    for (int p : present_classes)
      if (p == c) {
        classes.push_back(c);
        break;
      }

  LabelMap out(sal.h, sal.w, LabelMap::kIgnore);
  for (int i = 0; i < sal.h; ++i)
    for (int j = 0; j < sal.w; ++j) {
      int best = -1;
      float best_score = -1.0f;
      for (int c : classes) {
        const float score = cams.maps.at(c - 1, i, j);
        if (score > best_score) {  // strict: first (lowest) class wins ties
          best_score = score;
          best = c;
        }
      }
      const bool fg = best >= 0 && best_score >= t.cam_thresh;
      const bool bg = sal.at(i, j) < t.sal_thresh;
      if (fg && !bg)
        out.at(i, j) = static_cast<std::uint8_t>(best);
      else if (bg && !fg)
        out.at(i, j) = 0;
      // conflicting or absent evidence stays IGNORE
    }
  return out;
}

// Exact dense binary mean-field: Q starts at the unary probabilities and each
// iteration applies q_i <- sigmoid(logit(u_i) + 2 s_i - t_i) with
// s_i = sum_{j != i} k(i,j) q_j and t_i = sum_{j != i} k(i,j), where k adds a
// spatial Gaussian and a bilateral Gaussian over image intensities under a
// Potts compatibility. All pair sums are computed densely; desk-scale only.
inline SaliencyMap mean_field_crf(const SaliencyMap& unary_prob,
                                  const Tensor& image, const CrfParams& p) {
  detail::require(image.rank() == 3 && image.extent(1) == unary_prob.h &&
                      image.extent(2) == unary_prob.w,
                  "mean_field_crf: extent mismatch");
  p.check();
  if (p.iterations == 0) return unary_prob;

  const int h = unary_prob.h, w = unary_prob.w;
  const int n = h * w;
  const int channels = image.extent(0);

  // spatial factors depend only on the squared pixel distance
  const int max_d2 = (h - 1) * (h - 1) + (w - 1) * (w - 1);
  std::vector<float> spatial_lut(max_d2 + 1), bilateral_lut(max_d2 + 1);
  const float inv_s = 1.0f / (2.0f * p.spatial_sigma * p.spatial_sigma);
  const float inv_bs =
      1.0f / (2.0f * p.bilateral_spatial_sigma * p.bilateral_spatial_sigma);
  for (int d2 = 0; d2 <= max_d2; ++d2) {
    spatial_lut[d2] = std::exp(-d2 * inv_s);
    bilateral_lut[d2] = std::exp(-d2 * inv_bs);
  }
  const float inv_r =
      1.0f / (2.0f * p.bilateral_range_sigma * p.bilateral_range_sigma);

  // dense symmetric kernel with zero diagonal
  std::vector<float> kernel(static_cast<std::size_t>(n) * n, 0.0f);
  for (int i = 0; i < n; ++i) {
    const int yi = i / w, xi = i % w;
    for (int j = i + 1; j < n; ++j) {
      const int yj = j / w, xj = j % w;
      const int d2 = (yi - yj) * (yi - yj) + (xi - xj) * (xi - xj);
      float range2 = 0.0f;
      for (int c = 0; c < channels; ++c) {
        const float di = (image[static_cast<std::size_t>(c) * n + i] -
                          image[static_cast<std::size_t>(c) * n + j]) *
                         255.0f;
        range2 += di * di;
      }
      const float k = p.spatial_weight * spatial_lut[d2] +
                      p.bilateral_weight * bilateral_lut[d2] *
                          std::exp(-range2 * inv_r);
      kernel[static_cast<std::size_t>(i) * n + j] = k;
      kernel[static_cast<std::size_t>(j) * n + i] = k;
    }
  }

  std::vector<float> degree(n, 0.0f);  // t_i, fixed across iterations
  for (int i = 0; i < n; ++i) {
    const float* row = kernel.data() + static_cast<std::size_t>(i) * n;
    float acc = 0.0f;
    for (int j = 0; j < n; ++j) acc += row[j];
    degree[i] = acc;
  }

  constexpr float kProbEps = 1e-6f;
  std::vector<float> q(unary_prob.values.begin(), unary_prob.values.end());
  std::vector<float> logit_u(n);
  for (int i = 0; i < n; ++i) {
    const float u = std::min(1.0f - kProbEps, std::max(kProbEps, q[i]));
    logit_u[i] = std::log(u) - std::log(1.0f - u);
  }

  std::vector<float> next(n);
  for (int iter = 0; iter < p.iterations; ++iter) {
    for (int i = 0; i < n; ++i) {
      const float* row = kernel.data() + static_cast<std::size_t>(i) * n;
      float s = 0.0f;
      for (int j = 0; j < n; ++j) s += row[j] * q[j];
      const float a = logit_u[i] + 2.0f * s - degree[i];
      next[i] = a >= 0.0f ? 1.0f / (1.0f + std::exp(-a))
                          : std::exp(a) / (1.0f + std::exp(a));
    }
    q.swap(next);
  }

  SaliencyMap out(h, w);
  out.values.assign(q.begin(), q.end());
  return out;
}

// PGT_sal update: the first stage keeps the off-the-shelf map; later stages
// smooth the average of the previous refined prediction and the original map.
inline SaliencyMap update_sal_pgt(const std::optional<SaliencyMap>& prev_refined,
                                  const SaliencyMap& pt_sal, const Tensor& image,
                                  const CrfParams& crf, int stage) {
  detail::require(stage >= 0, "update_sal_pgt: stage must be >= 0");
  if (stage == 0) return pt_sal;
  detail::require(prev_refined.has_value(),
                  "update_sal_pgt: stage > 0 needs the previous refined map");
  detail::require(prev_refined->h == pt_sal.h && prev_refined->w == pt_sal.w,
                  "update_sal_pgt: extent mismatch");
  SaliencyMap unary(pt_sal.h, pt_sal.w);
  for (std::size_t i = 0; i < unary.size(); ++i)
    unary.values[i] = 0.5f * (prev_refined->values[i] + pt_sal.values[i]);
  return mean_field_crf(unary, image, crf);
}

// closed lower bound: values exactly at the threshold are foreground
inline LabelMap labelmap_from_saliency(const SaliencyMap& sal, float thresh) {
  LabelMap out(sal.h, sal.w);
  for (std::size_t i = 0; i < sal.size(); ++i)
    out.labels[i] = sal.values[i] >= thresh ? 1 : 0;
  return out;
}

// sum of absolute horizontal and vertical neighbour differences
inline double total_variation(const SaliencyMap& m) {
  double tv = 0.0;
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) {
      if (j + 1 < m.w) tv += std::abs(m.at(i, j) - m.at(i, j + 1));
      if (i + 1 < m.h) tv += std::abs(m.at(i, j) - m.at(i + 1, j));
    }
  return tv;
}

}  // namespace affseg
