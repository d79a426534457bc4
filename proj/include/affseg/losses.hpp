// The three task losses with analytic gradients, the weighted total,
// affinity-based prediction refinement, and a central finite-difference
// gradient checker. Loss values accumulate in double so the checker is not
// drowned by f32 rounding noise.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "affseg/affinity.hpp"
#include "affseg/image_io.hpp"
#include "affseg/tensor.hpp"

namespace affseg {

struct LossWeights {
  float lambda1 = 1.0f;
  float lambda2 = 1.0f;
  float lambda3 = 1.0f;

  void check() const {
    detail::require(lambda1 >= 0.0f && lambda2 >= 0.0f && lambda3 >= 0.0f,
                    "LossWeights: weights must be >= 0");
  }
};

struct LossValue {
  double value = 0.0;
  Tensor gradient;  // w.r.t. the prediction input
};

constexpr double kProbClampEps = 1e-7;

namespace detail {

inline double softplus(double z) {
  // log(1 + e^z), stable for large |z|
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

inline double logistic(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                  : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace detail

// mean over classes of -[y log s(x) + (1-y) log s(-x)]; gradient (s(x)-y)/C
inline LossValue multilabel_soft_margin(const Tensor& logits,
                                        const std::vector<int>& targets) {
  detail::require(logits.rank() == 1, "multilabel_soft_margin: logits are 1D");
  const int c = logits.extent(0);
  detail::require(static_cast<int>(targets.size()) == c,
                  "multilabel_soft_margin: target extent mismatch");
  LossValue out;
  out.gradient = Tensor(logits.shape());
  double total = 0.0;
  for (int i = 0; i < c; ++i) {
    detail::require(targets[i] == 0 || targets[i] == 1,
                    "multilabel_soft_margin: targets must be 0/1");
    const double x = logits.at(i);
    const double y = targets[i];
    total += y * detail::softplus(-x) + (1.0 - y) * detail::softplus(x);
    out.gradient.at(i) =
        static_cast<float>((detail::logistic(x) - y) / static_cast<double>(c));
  }
  out.value = total / static_cast<double>(c);
  return out;
}

// mean over pixels of -[t log p + (1-t) log(1-p)] with p clamped to
// [eps, 1-eps]; the gradient is zero wherever the clamp is active.
inline LossValue bce_pixelwise(const SaliencyMap& pred, const LabelMap& target) {
  detail::require(pred.h == target.h && pred.w == target.w,
                  "bce_pixelwise: extent mismatch");
  const std::size_t n = pred.size();
  LossValue out;
  out.gradient = Tensor(Shape{pred.h, pred.w});
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    detail::require(target.labels[i] == 0 || target.labels[i] == 1,
                    "bce_pixelwise: target must be binary");
    const double raw = pred.values[i];
    const double p =
        std::min(1.0 - kProbClampEps, std::max(kProbClampEps, raw));
    const double t = target.labels[i];
    total += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    if (raw > kProbClampEps && raw < 1.0 - kProbClampEps)
      out.gradient[i] = static_cast<float>(
          (p - t) / (p * (1.0 - p) * static_cast<double>(n)));
  }
  out.value = total / static_cast<double>(n);
  return out;
}

// mean of -log p[target] over non-IGNORE pixels; IGNORE pixels contribute
// neither loss nor gradient. All-IGNORE maps give zero loss.
inline LossValue ce_pixelwise(const Tensor& pred_probs, const LabelMap& target) {
  detail::require(pred_probs.rank() == 3, "ce_pixelwise: need C x H x W");
  const int c = pred_probs.extent(0);
  const int h = pred_probs.extent(1), w = pred_probs.extent(2);
  detail::require(h == target.h && w == target.w,
                  "ce_pixelwise: extent mismatch");
  const std::size_t n = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < n; ++p) {
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch)
      s += pred_probs[static_cast<std::size_t>(ch) * n + p];
    detail::require(std::abs(s - 1.0) <= 1e-4,
                    "ce_pixelwise: per-pixel probabilities must sum to 1");
  }

  std::size_t m = 0;
  for (std::size_t p = 0; p < n; ++p)
    if (target.labels[p] != LabelMap::kIgnore) ++m;

  LossValue out;
  out.gradient = Tensor(pred_probs.shape());
  if (m == 0) return out;

  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const std::uint8_t label = target.labels[p];
    if (label == LabelMap::kIgnore) continue;
    detail::require(label < c, "ce_pixelwise: label outside class range");
    const double raw = pred_probs[static_cast<std::size_t>(label) * n + p];
    const double q = std::max(kProbClampEps, raw);
    total += -std::log(q);
    if (raw > kProbClampEps)
      out.gradient[static_cast<std::size_t>(label) * n + p] =
          static_cast<float>(-1.0 / (q * static_cast<double>(m)));
  }
  out.value = total / static_cast<double>(m);
  return out;
}

// L_total = l1 L_cls + l2 (L_sal + L^u_sal + L^p_sal)
//         + l3 (L_seg + L^u_seg + L^p_seg)
struct LossComponents {
  LossValue cls, sal, sal_ref_u, sal_ref_p, seg, seg_ref_u, seg_ref_p;
};

struct TotalLossValue {
  double value = 0.0;
  // gradient of the total w.r.t. each component's own prediction input
  Tensor d_cls, d_sal, d_sal_ref_u, d_sal_ref_p, d_seg, d_seg_ref_u, d_seg_ref_p;
};

inline TotalLossValue total_loss(const LossComponents& c,
                                 const LossWeights& w) {
  w.check();
  TotalLossValue out;
  out.value = w.lambda1 * c.cls.value +
              w.lambda2 * (c.sal.value + c.sal_ref_u.value + c.sal_ref_p.value) +
              w.lambda3 * (c.seg.value + c.seg_ref_u.value + c.seg_ref_p.value);
  out.d_cls = scale(c.cls.gradient, w.lambda1);
  out.d_sal = scale(c.sal.gradient, w.lambda2);
  out.d_sal_ref_u = scale(c.sal_ref_u.gradient, w.lambda2);
  out.d_sal_ref_p = scale(c.sal_ref_p.gradient, w.lambda2);
  out.d_seg = scale(c.seg.gradient, w.lambda3);
  out.d_seg_ref_u = scale(c.seg_ref_u.gradient, w.lambda3);
  out.d_seg_ref_p = scale(c.seg_ref_p.gradient, w.lambda3);
  return out;
}

// ---------------------------------------------------------------------------
// Prediction refinement by the cross-task affinities (training-time
// constraints and the inference path).

enum class PredictionKind { kSaliency, kSegmentation };

// residual unary refinement: out(i) = p(i) + sum_j u(j) p(j) per channel;
// segmentation outputs are re-normalized per pixel to stay a distribution
inline Tensor refine_prediction_unary(const Tensor& p, const UnaryAffinity& u,
                                      PredictionKind kind) {
  detail::require(p.rank() == 3 && p.extent(1) == u.h && p.extent(2) == u.w,
                  "refine_prediction_unary: extent mismatch");
  const int c = p.extent(0);
  const int n = u.positions();
  Tensor out(p.shape());
  for (int ch = 0; ch < c; ++ch) {
    const float* src = p.data() + static_cast<std::size_t>(ch) * n;
    float ctx = 0.0f;
    for (int j = 0; j < n; ++j) ctx += u.map[static_cast<std::size_t>(j)] * src[j];
    float* dst = out.data() + static_cast<std::size_t>(ch) * n;
    for (int j = 0; j < n; ++j) dst[j] = src[j] + ctx;
  }
  if (kind == PredictionKind::kSegmentation) {
    for (int j = 0; j < n; ++j) {
      float s = 0.0f;
      for (int ch = 0; ch < c; ++ch)
        s += out[static_cast<std::size_t>(ch) * n + j];
      for (int ch = 0; ch < c; ++ch)
        out[static_cast<std::size_t>(ch) * n + j] /= s;
    }
  }
  return out;
}

// row-stochastic aggregation per channel; convex, so saliency stays in [0,1]
// and per-pixel segmentation simplexes are preserved exactly
inline Tensor refine_prediction_pairwise(const Tensor& p,
                                         const PairwiseAffinity& a) {
  detail::require(p.rank() == 3 && p.extent(1) == a.h && p.extent(2) == a.w,
                  "refine_prediction_pairwise: extent mismatch");
  return aggregate_pairwise(a, p);
}

// ---------------------------------------------------------------------------
// Central finite differences against the analytic gradient. Relative error
// uses max(|analytic|, |numeric|, 0.01) as the denominator so near-zero
// coordinates are compared at an absolute 1e-2 scale.

inline double finite_diff_check(
    const std::function<LossValue(const Tensor&)>& fn, const Tensor& point,
    float h = 1e-3f) {
  detail::require(h > 0.0f, "finite_diff_check: h must be positive");
  const LossValue at_point = fn(point);
  detail::require(at_point.gradient.shape() == point.shape(),
                  "finite_diff_check: gradient shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    Tensor plus = point, minus = point;
    plus[i] = point[i] + h;
    minus[i] = point[i] - h;
    const double dh =
        static_cast<double>(plus[i]) - static_cast<double>(minus[i]);
    const double fd = (fn(plus).value - fn(minus).value) / dh;
    const double an = at_point.gradient[i];
    const double rel =
        std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-2});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace affseg
