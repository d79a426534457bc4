// Cross-task dual-affinity learning: task-specific pairwise and unary
// affinities from projected features, their adaptive fusion into cross-task
// affinities, residual feature enhancement, and the operation-count model
// for the pairwise-only vs dual variants.
#pragma once

#include <cstdint>
#include <utility>

#include "affseg/tensor.hpp"

namespace affseg {

// Weights of one 1x1 convolution: weight is Dout x Din, bias is Dout.
struct ChannelMix {
  Tensor weight;
  Tensor bias;

  int out_channels() const { return weight.extent(0); }
  int in_channels() const { return weight.extent(1); }

  Tensor operator()(const Tensor& x) const {
    return channel_mix(x, weight, bias);
  }
};

inline ChannelMix zero_channel_mix(int dout, int din) {
  return ChannelMix{Tensor(Shape{dout, din}), Tensor(Shape{dout})};
}

// Query/key/value projections (D -> D) plus the 1-channel unary projection.
struct ProjectionParams {
  ChannelMix q, k, v;  // D -> D
  ChannelMix u;        // D -> 1

  void check(int d) const {
    detail::require(q.in_channels() == d && q.out_channels() == d &&
                        k.in_channels() == d && k.out_channels() == d &&
                        v.in_channels() == d && v.out_channels() == d,
                    "ProjectionParams: q/k/v must map D -> D");
    detail::require(u.in_channels() == d && u.out_channels() == 1,
                    "ProjectionParams: unary projection must map D -> 1");
  }
};

inline ProjectionParams zero_projection(int d) {
  return ProjectionParams{zero_channel_mix(d, d), zero_channel_mix(d, d),
                          zero_channel_mix(d, d), zero_channel_mix(1, d)};
}

// Row-stochastic (H*W) x (H*W) query->key attention.
struct PairwiseAffinity {
  Tensor matrix;
  int h = 0;
  int w = 0;

  PairwiseAffinity(Tensor m, int height, int width)
      : matrix(std::move(m)), h(height), w(width) {
    const int n = h * w;
    detail::require(matrix.rank() == 2 && matrix.extent(0) == n &&
                        matrix.extent(1) == n,
                    "PairwiseAffinity: matrix must be (H*W) x (H*W)");
    for (int i = 0; i < n; ++i) {
      double row_sum = 0.0;  // double so the check measures the data, not
                             // the accumulator
      for (int j = 0; j < n; ++j) {
        const float a = matrix.at(i, j);
        detail::require(a >= 0.0f && a <= 1.0f,
                        "PairwiseAffinity: entry outside [0,1]");
        row_sum += a;
      }
      detail::require(std::abs(row_sum - 1.0) <= 1e-5,
                      "PairwiseAffinity: row does not sum to 1");
    }
  }

  int positions() const { return h * w; }
};

// Spatial attention map shared by all queries; entries sum to 1.
struct UnaryAffinity {
  Tensor map;  // flat, length H*W
  int h = 0;
  int w = 0;

  UnaryAffinity(Tensor m, int height, int width)
      : map(std::move(m)), h(height), w(width) {
    detail::require(map.rank() == 1 && map.extent(0) == h * w,
                    "UnaryAffinity: map must have H*W entries");
    double total = 0.0;
    for (std::size_t i = 0; i < map.size(); ++i) {
      detail::require(map[i] >= 0.0f && map[i] <= 1.0f,
                      "UnaryAffinity: entry outside [0,1]");
      total += map[i];
    }
    detail::require(std::abs(total - 1.0) <= 1e-5,
                    "UnaryAffinity: map does not sum to 1");
  }

  int positions() const { return h * w; }
};

// The fusion submodule: a per-entry 2 -> hidden -> 2 channel-mix stack with
// ReLU in between and a channel softmax, giving convex weights that always
// sum to one. One layer pair for pairwise fusion, one for unary fusion.
struct FusionParams {
  ChannelMix pair1, pair2;
  ChannelMix unary1, unary2;

  void check() const {
    detail::require(pair1.in_channels() == 2 && unary1.in_channels() == 2,
                    "FusionParams: first layers take the 2-channel stack");
    detail::require(pair2.out_channels() == 2 && unary2.out_channels() == 2,
                    "FusionParams: second layers must emit exactly 2 channels");
    detail::require(pair2.in_channels() == pair1.out_channels() &&
                        unary2.in_channels() == unary1.out_channels(),
                    "FusionParams: hidden extents mismatch");
  }
};

inline FusionParams zero_fusion(int hidden = 4) {
  return FusionParams{zero_channel_mix(hidden, 2), zero_channel_mix(2, hidden),
                      zero_channel_mix(hidden, 2), zero_channel_mix(2, hidden)};
}

struct DualAffinityOutput {
  Tensor f_sal_out;
  Tensor f_seg_out;
  PairwiseAffinity a_ct_pairwise;
  UnaryAffinity a_ct_unary;
};

namespace detail {

// D x H x W -> (H*W) x D
inline Tensor flatten_positions(const Tensor& x) {
  const int d = x.extent(0);
  const int n = x.extent(1) * x.extent(2);
  return transpose(reshape(x, Shape{d, n}));
}

// softmax over the 2-channel axis of the fused stack
inline std::pair<Tensor, Tensor> fusion_weights(const Tensor& a,
                                                const Tensor& b,
                                                const ChannelMix& l1,
                                                const ChannelMix& l2) {
  detail::require(a.shape() == b.shape(), "fusion: input shape mismatch");
  const int n = static_cast<int>(a.size());
  Tensor stacked(Shape{2, n, 1});
  for (int i = 0; i < n; ++i) {
    stacked.at(0, i, 0) = a[static_cast<std::size_t>(i)];
    stacked.at(1, i, 0) = b[static_cast<std::size_t>(i)];
  }
  const Tensor logits = l2(relu(l1(stacked)));
  const Tensor weights = softmax(logits, 0);
  Tensor w1(a.shape()), w2(a.shape());
  for (int i = 0; i < n; ++i) {
    w1[static_cast<std::size_t>(i)] = weights.at(0, i, 0);
    w2[static_cast<std::size_t>(i)] = weights.at(1, i, 0);
  }
  return {std::move(w1), std::move(w2)};
}

inline Tensor renormalize_rows(Tensor m) {
  const int rows = m.extent(0), cols = m.extent(1);
  for (int i = 0; i < rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += m.at(i, j);
    const float inv = static_cast<float>(1.0 / s);
    for (int j = 0; j < cols; ++j) m.at(i, j) *= inv;
  }
  return m;
}

}  // namespace detail

// A^p = softmax over keys of (Q K^T) with Q, K the projected features
// flattened to (H*W) x D.
inline PairwiseAffinity pairwise_affinity(const Tensor& features,
                                          const ProjectionParams& proj) {
  detail::require(features.rank() == 3, "pairwise_affinity: need D x H x W");
  proj.check(features.extent(0));
  const int h = features.extent(1), w = features.extent(2);
  const Tensor q = detail::flatten_positions(proj.q(features));  // N x D
  const Tensor k = proj.k(features);                             // D x H x W
  const Tensor logits =
      matmul(q, reshape(k, Shape{k.extent(0), h * w}));  // N x N
  return PairwiseAffinity(softmax(logits, 1), h, w);
}

// out(i) = sum_j a(i,j) * values(j), per channel.
inline Tensor aggregate_pairwise(const PairwiseAffinity& a,
                                 const Tensor& values) {
  detail::require(values.rank() == 3 && values.extent(1) == a.h &&
                      values.extent(2) == a.w,
                  "aggregate_pairwise: spatial extents mismatch");
  const int d = values.extent(0);
  const Tensor flat = reshape(values, Shape{d, a.positions()});
  return reshape(matmul(flat, transpose(a.matrix)), values.shape());
}

// A^u = softmax over all positions of the 1-channel unary projection.
inline UnaryAffinity unary_affinity(const Tensor& features,
                                    const ProjectionParams& proj) {
  detail::require(features.rank() == 3, "unary_affinity: need D x H x W");
  proj.check(features.extent(0));
  const int h = features.extent(1), w = features.extent(2);
  const Tensor logits = reshape(proj.u(features), Shape{h * w});
  return UnaryAffinity(softmax(logits, 0), h, w);
}

// Every position receives the same attention-weighted context vector.
inline Tensor aggregate_unary(const UnaryAffinity& u, const Tensor& values) {
  detail::require(values.rank() == 3 && values.extent(1) == u.h &&
                      values.extent(2) == u.w,
                  "aggregate_unary: spatial extents mismatch");
  const int d = values.extent(0);
  const int n = u.positions();
  Tensor out(values.shape());
  for (int c = 0; c < d; ++c) {
    const float* src = values.data() + static_cast<std::size_t>(c) * n;
    float ctx = 0.0f;
    for (int j = 0; j < n; ++j) ctx += u.map[static_cast<std::size_t>(j)] * src[j];
    float* dst = out.data() + static_cast<std::size_t>(c) * n;
    for (int j = 0; j < n; ++j) dst[j] = ctx;
  }
  return out;
}

// Per-entry convex combination of the two task affinities, with rows
// renormalized afterwards: entrywise weights do not preserve row sums.
inline PairwiseAffinity fuse_pairwise(const PairwiseAffinity& a_sal,
                                      const PairwiseAffinity& a_seg,
                                      const FusionParams& fp) {
  detail::require(a_sal.h == a_seg.h && a_sal.w == a_seg.w,
                  "fuse_pairwise: extent mismatch");
  fp.check();
  auto [w1, w2] =
      detail::fusion_weights(a_sal.matrix, a_seg.matrix, fp.pair1, fp.pair2);
  Tensor fused(a_sal.matrix.shape());
  for (std::size_t i = 0; i < fused.size(); ++i)
    fused[i] = w1[i] * a_sal.matrix[i] + w2[i] * a_seg.matrix[i];
  return PairwiseAffinity(detail::renormalize_rows(std::move(fused)), a_sal.h,
                          a_sal.w);
}

inline UnaryAffinity fuse_unary(const UnaryAffinity& u_sal,
                                const UnaryAffinity& u_seg,
                                const FusionParams& fp) {
  detail::require(u_sal.h == u_seg.h && u_sal.w == u_seg.w,
                  "fuse_unary: extent mismatch");
  fp.check();
  auto [w1, w2] =
      detail::fusion_weights(u_sal.map, u_seg.map, fp.unary1, fp.unary2);
  Tensor fused(u_sal.map.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < fused.size(); ++i) {
    fused[i] = w1[i] * u_sal.map[i] + w2[i] * u_seg.map[i];
    total += fused[i];
  }
  const float inv = static_cast<float>(1.0 / total);
  for (std::size_t i = 0; i < fused.size(); ++i) fused[i] *= inv;
  return UnaryAffinity(std::move(fused), u_sal.h, u_sal.w);
}

// Full module: task-specific dual affinities enhance each task's features
// residually; the fused cross-task affinities are returned for prediction
// and CAM refinement.
inline DualAffinityOutput dual_affinity_forward(const Tensor& f_sal_in,
                                                const Tensor& f_seg_in,
                                                const ProjectionParams& proj_sal,
                                                const ProjectionParams& proj_seg,
                                                const FusionParams& fp) {
  detail::require(f_sal_in.shape() == f_seg_in.shape(),
                  "dual_affinity_forward: feature extents mismatch");

  const PairwiseAffinity ap_sal = pairwise_affinity(f_sal_in, proj_sal);
  const PairwiseAffinity ap_seg = pairwise_affinity(f_seg_in, proj_seg);
  const UnaryAffinity au_sal = unary_affinity(f_sal_in, proj_sal);
  const UnaryAffinity au_seg = unary_affinity(f_seg_in, proj_seg);

  const Tensor v_sal = proj_sal.v(f_sal_in);
  const Tensor v_seg = proj_seg.v(f_seg_in);

  const Tensor f_sal_out = add(
      add(aggregate_pairwise(ap_sal, v_sal), aggregate_unary(au_sal, v_sal)),
      f_sal_in);
  const Tensor f_seg_out = add(
      add(aggregate_pairwise(ap_seg, v_seg), aggregate_unary(au_seg, v_seg)),
      f_seg_in);

  return DualAffinityOutput{f_sal_out, f_seg_out,
                            fuse_pairwise(ap_sal, ap_seg, fp),
                            fuse_unary(au_sal, au_seg, fp)};
}

// ---------------------------------------------------------------------------
// Multiply-accumulate counting model. The pairwise-only block costs
// H*W*D^2 + (H*W)^2*D; the dual variant adds H*W*D + (H*W)^2, so the
// overhead/base ratio is exactly 1/D.

enum class AffinityVariant { kPairwiseOnly, kDual };

struct OpCount {
  std::uint64_t base = 0;
  std::uint64_t overhead = 0;

  double ratio() const {
    return base == 0 ? 0.0
                     : static_cast<double>(overhead) / static_cast<double>(base);
  }
};

inline OpCount op_count(int h, int w, int d, AffinityVariant variant) {
  detail::require(h >= 1 && w >= 1 && d >= 1, "op_count: extents must be >= 1");
  const std::uint64_t hw = static_cast<std::uint64_t>(h) * w;
  const std::uint64_t dd = static_cast<std::uint64_t>(d);
  OpCount c;
  c.base = hw * dd * dd + hw * hw * dd;
  c.overhead = variant == AffinityVariant::kDual ? hw * dd + hw * hw : 0;
  return c;
}

}  // namespace affseg
