// Class activation maps: extraction from backbone features and classifier
// weights, per-class normalization, multi-scale fusion, and refinement by a
// cross-task pairwise affinity.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "affseg/affinity.hpp"
#include "affseg/tensor.hpp"

namespace affseg {

// Fully connected classifier weights, K channels x C classes. The same
// weights produce both the class logits (after GAP) and the CAM maps; the
// CAM path uses no bias.
struct Classifier {
  Tensor u;

  int channels() const { return u.extent(0); }
  int classes() const { return u.extent(1); }
};

struct CamStack {
  Tensor maps;  // C x H x W
  bool normalized = false;

  int classes() const { return maps.extent(0); }
  int height() const { return maps.extent(1); }
  int width() const { return maps.extent(2); }
};

// CAM^c(i,j) = sum_k U(k,c) * F_k(i,j)
inline CamStack compute_cam(const Tensor& features, const Classifier& cls) {
  detail::require(features.rank() == 3, "compute_cam: need K x H x W");
  detail::require(features.extent(0) == cls.channels(),
                  "compute_cam: channel count mismatch, features have " +
                      std::to_string(features.extent(0)) +
                      ", classifier expects " + std::to_string(cls.channels()));
  const Tensor weights = transpose(cls.u);  // C x K
  const Tensor bias(Shape{cls.classes()});
  return CamStack{channel_mix(features, weights, bias), false};
}

// clamp negatives, divide each class slice by its spatial max
inline CamStack normalize_cam(const CamStack& cams) {
  return CamStack{max_normalize(cams.maps), true};
}

// Evaluates the model at each scale, maps every per-scale CAM back to the
// image size, sums them and min-max normalizes per class.
using CamEvaluator = std::function<CamStack(const Tensor& image)>;

inline CamStack multiscale_cam(const CamEvaluator& forward, const Tensor& image,
                               const std::vector<float>& scales) {
  detail::require(image.rank() == 3, "multiscale_cam: image must be C x H x W");
  detail::require(!scales.empty(), "multiscale_cam: scale list is empty");
  const int h = image.extent(1), w = image.extent(2);

  Tensor accum;
  for (float s : scales) {
    detail::require(s > 0.0f, "multiscale_cam: scales must be positive");
    const int sh = std::max(1, static_cast<int>(std::lround(h * s)));
    const int sw = std::max(1, static_cast<int>(std::lround(w * s)));
    const CamStack cam = forward(bilinear_resize(image, sh, sw));
    const Tensor upsampled = bilinear_resize(cam.maps, h, w);
    accum = accum.empty() ? upsampled : add(accum, upsampled);
  }
  return CamStack{minmax_normalize(accum), true};
}

// CAM_ref^c(i,j) = sum_kl A(ij, kl) * CAM^c(k,l), re-normalized per class so
// downstream thresholding keeps operating on [0,1] maps.
inline CamStack refine_cam(const CamStack& cams, const PairwiseAffinity& a) {
  detail::require(cams.normalized, "refine_cam: input must be normalized");
  detail::require(cams.height() == a.h && cams.width() == a.w,
                  "refine_cam: spatial extents mismatch");
  return CamStack{max_normalize(aggregate_pairwise(a, cams.maps)), true};
}

}  // namespace affseg
