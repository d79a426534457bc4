// The desk-scale three-branch multi-task model: a tiny channel-mixing
// backbone with neighbourhood averaging, a GAP+fc classification head, two
// prediction heads, and the dual-affinity module in the middle. The same
// graph builder drives training (with gradients) and inference (without),
// so the two paths cannot drift apart.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "affseg/affinity.hpp"
#include "affseg/autodiff.hpp"
#include "affseg/cam.hpp"
#include "affseg/rng.hpp"
#include "affseg/tensor.hpp"

namespace affseg {

struct ModelConfig {
  int image_channels = 3;
  int backbone_channels = 16;  // K
  int head_channels = 16;      // D
  int num_fg_classes = 3;      // C; the segmentation head emits C+1 channels
  int fusion_hidden = 4;
  int downsample = 4;          // spatial reduction through the backbone: 1, 2, 4

  void check() const {
    detail::require(image_channels >= 1 && backbone_channels >= 1 &&
                        head_channels >= 1 && num_fg_classes >= 1 &&
                        fusion_hidden >= 1,
                    "ModelConfig: extents must be >= 1");
    detail::require(downsample == 1 || downsample == 2 || downsample == 4,
                    "ModelConfig: downsample must be 1, 2 or 4");
  }

  // strides of the two backbone pooling steps
  std::pair<int, int> strides() const {
    if (downsample == 4) return {2, 2};
    if (downsample == 2) return {2, 1};
    return {1, 1};
  }
};

struct ToyModel {
  ModelConfig cfg;
  ChannelMix backbone1, backbone2;  // RGB -> K, K -> K
  Tensor cls_u;                     // K x C classifier (shared with the CAM)
  ChannelMix sal1, sal2;            // K -> D, D -> D
  ChannelMix seg1, seg2;
  ProjectionParams proj_sal, proj_seg;
  FusionParams fusion;
  ChannelMix sal_out;  // D -> 1
  ChannelMix seg_out;  // D -> C+1

  Classifier classifier() const { return Classifier{cls_u}; }
};

// Canonical parameter enumeration; every consumer (optimizer, checkpoints,
// graph leaves, gradient checks) iterates parameters in this order.
template <typename ModelT, typename Fn>
void visit_parameters(ModelT& m, Fn&& fn) {
  auto mix = [&fn](const char* name, auto& cm) {
    fn(std::string(name) + ".w", cm.weight);
    fn(std::string(name) + ".b", cm.bias);
  };
  mix("backbone1", m.backbone1);
  mix("backbone2", m.backbone2);
  fn(std::string("cls_u"), m.cls_u);
  mix("sal1", m.sal1);
  mix("sal2", m.sal2);
  mix("seg1", m.seg1);
  mix("seg2", m.seg2);
  mix("proj_sal.q", m.proj_sal.q);
  mix("proj_sal.k", m.proj_sal.k);
  mix("proj_sal.v", m.proj_sal.v);
  mix("proj_sal.u", m.proj_sal.u);
  mix("proj_seg.q", m.proj_seg.q);
  mix("proj_seg.k", m.proj_seg.k);
  mix("proj_seg.v", m.proj_seg.v);
  mix("proj_seg.u", m.proj_seg.u);
  mix("fusion.pair1", m.fusion.pair1);
  mix("fusion.pair2", m.fusion.pair2);
  mix("fusion.unary1", m.fusion.unary1);
  mix("fusion.unary2", m.fusion.unary2);
  mix("sal_out", m.sal_out);
  mix("seg_out", m.seg_out);
}

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

inline std::vector<ParamRef> all_parameters(ToyModel& m) {
  std::vector<ParamRef> out;
  visit_parameters(m, [&out](const std::string& name, Tensor& t) {
    out.push_back(ParamRef{name, &t});
  });
  return out;
}

inline bool is_classifier_parameter(const std::string& name) {
  return name.rfind("backbone", 0) == 0 || name == "cls_u";
}

// symmetric Glorot-uniform init, deterministic in the seed; biases stay zero
inline ToyModel make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.check();
  const int k = cfg.backbone_channels, d = cfg.head_channels;
  const int c = cfg.num_fg_classes, f = cfg.fusion_hidden;

  ToyModel m;
  m.cfg = cfg;
  m.backbone1 = zero_channel_mix(k, cfg.image_channels);
  m.backbone2 = zero_channel_mix(k, k);
  m.cls_u = Tensor(Shape{k, c});
  m.sal1 = zero_channel_mix(d, k);
  m.sal2 = zero_channel_mix(d, d);
  m.seg1 = zero_channel_mix(d, k);
  m.seg2 = zero_channel_mix(d, d);
  m.proj_sal = zero_projection(d);
  m.proj_seg = zero_projection(d);
  m.fusion = zero_fusion(f);
  m.sal_out = zero_channel_mix(1, d);
  m.seg_out = zero_channel_mix(c + 1, d);

  // every parameter, biases included, is uniform in +/- sqrt(6/(fi+fo));
  // non-zero biases also keep ReLU pre-activations away from the exact
  // kink at initialization
  Rng rng(seed);
  int fan_in = 1, fan_out = 1;
  visit_parameters(m, [&](const std::string& name, Tensor& t) {
    if (t.rank() == 2) {  // weight; remember fans for the matching bias
      if (name == "cls_u") {
        fan_in = t.extent(0);  // K x C layout
        fan_out = t.extent(1);
      } else {
        fan_out = t.extent(0);
        fan_in = t.extent(1);
      }
    }
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = rng.uniform_range(-bound, bound);
  });
  return m;
}

// ---------------------------------------------------------------------------
// Graph building

struct GraphLeaves {
  std::vector<std::string> names;
  std::vector<ad::Value> values;

  ad::Value at(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return values[i];
    throw std::invalid_argument("GraphLeaves: unknown parameter " + name);
  }
};

// trainable filter decides which parameter leaves carry gradients
inline GraphLeaves make_leaves(
    ad::Graph& g, const ToyModel& m,
    const std::function<bool(const std::string&)>& trainable) {
  GraphLeaves leaves;
  visit_parameters(m, [&](const std::string& name, const Tensor& t) {
    leaves.names.push_back(name);
    leaves.values.push_back(g.leaf(t, trainable(name)));
  });
  return leaves;
}

struct ClsForward {
  GraphLeaves leaves;
  ad::Value features;  // K x h x w
  ad::Value logits;    // {C}
  int fh = 0, fw = 0;
};

namespace detail {

// pool -> 1x1 mix -> relu, twice
inline ad::Value build_backbone(ad::Graph& g, const ModelConfig& cfg,
                                const GraphLeaves& leaves, ad::Value image) {
  const auto [s1, s2] = cfg.strides();
  ad::Value x = g.avg_pool3x3(image, s1);
  x = g.relu(g.channel_mix(x, leaves.at("backbone1.w"), leaves.at("backbone1.b")));
  x = g.avg_pool3x3(x, s2);
  x = g.relu(g.channel_mix(x, leaves.at("backbone2.w"), leaves.at("backbone2.b")));
  return x;
}

inline ad::Value build_head(ad::Graph& g, const GraphLeaves& leaves,
                            const std::string& prefix, ad::Value features) {
  ad::Value x = g.relu(g.channel_mix(features, leaves.at(prefix + "1.w"),
                                     leaves.at(prefix + "1.b")));
  return g.relu(
      g.channel_mix(x, leaves.at(prefix + "2.w"), leaves.at(prefix + "2.b")));
}

}  // namespace detail

inline ClsForward build_cls_graph(ad::Graph& g, const ToyModel& m,
                                  const Tensor& image, bool trainable) {
  m.cfg.check();
  detail::require(image.rank() == 3 &&
                      image.extent(0) == m.cfg.image_channels,
                  "build_cls_graph: image extent mismatch");
  ClsForward out;
  out.leaves = make_leaves(g, m, [trainable](const std::string& name) {
    return trainable && is_classifier_parameter(name);
  });
  const ad::Value image_leaf = g.leaf(image, false);
  out.features = detail::build_backbone(g, m.cfg, out.leaves, image_leaf);
  out.fh = g.shape(out.features).extent(1);
  out.fw = g.shape(out.features).extent(2);
  const int k = m.cfg.backbone_channels;
  const ad::Value pooled = g.reshape(g.gap(out.features), Shape{1, k});
  out.logits =
      g.reshape(g.matmul(pooled, out.leaves.at("cls_u")), Shape{m.cfg.num_fg_classes});
  return out;
}

struct FullForward {
  GraphLeaves leaves;
  ad::Value features;    // K x h x w
  ad::Value f_sal_in, f_seg_in;  // D x h x w head features
  ad::Value logits;      // {C}
  ad::Value a_ct_pair;   // {N, N}, rows sum to 1
  ad::Value a_ct_unary;  // {1, N}, sums to 1
  ad::Value p_sal;       // {1, N} in (0,1)
  ad::Value p_seg;       // {C+1, N}, columns sum to 1
  ad::Value p_sal_ref_u, p_sal_ref_p;  // {1, N}
  ad::Value p_seg_ref_u, p_seg_ref_p;  // {C+1, N}
  int fh = 0, fw = 0;
};

// the whole training-time forward pass of Fig. 2: backbone, three heads,
// dual-affinity enhancement, predictions, and affinity-refined predictions
inline FullForward build_full_graph(ad::Graph& g, const ToyModel& m,
                                    const Tensor& image, bool trainable) {
  m.cfg.check();
  detail::require(image.rank() == 3 &&
                      image.extent(0) == m.cfg.image_channels,
                  "build_full_graph: image extent mismatch");
  FullForward out;
  out.leaves = make_leaves(
      g, m, [trainable](const std::string&) { return trainable; });
  const GraphLeaves& L = out.leaves;
  const ad::Value image_leaf = g.leaf(image, false);

  out.features = detail::build_backbone(g, m.cfg, L, image_leaf);
  out.fh = g.shape(out.features).extent(1);
  out.fw = g.shape(out.features).extent(2);
  const int n = out.fh * out.fw;
  const int k = m.cfg.backbone_channels;
  const int d = m.cfg.head_channels;
  const int c = m.cfg.num_fg_classes;

  const ad::Value pooled = g.reshape(g.gap(out.features), Shape{1, k});
  out.logits = g.reshape(g.matmul(pooled, L.at("cls_u")), Shape{c});

  const ad::Value f_sal_in = detail::build_head(g, L, "sal", out.features);
  const ad::Value f_seg_in = detail::build_head(g, L, "seg", out.features);
  out.f_sal_in = f_sal_in;
  out.f_seg_in = f_seg_in;

  // task-specific pairwise and unary affinities
  auto task_affinity = [&](ad::Value f_in, const std::string& proj)
      -> std::tuple<ad::Value, ad::Value, ad::Value> {
    const ad::Value q = g.channel_mix(f_in, L.at(proj + ".q.w"), L.at(proj + ".q.b"));
    const ad::Value key = g.channel_mix(f_in, L.at(proj + ".k.w"), L.at(proj + ".k.b"));
    const ad::Value qf = g.transpose2d(g.reshape(q, Shape{d, n}));  // N x D
    const ad::Value kf = g.reshape(key, Shape{d, n});               // D x N
    const ad::Value a_pair = g.softmax2d(g.matmul(qf, kf), 1);      // N x N
    const ad::Value u_logits =
        g.reshape(g.channel_mix(f_in, L.at(proj + ".u.w"), L.at(proj + ".u.b")),
                  Shape{1, n});
    const ad::Value a_unary = g.softmax2d(u_logits, 1);  // 1 x N
    const ad::Value v =
        g.reshape(g.channel_mix(f_in, L.at(proj + ".v.w"), L.at(proj + ".v.b")),
                  Shape{d, n});
    return {a_pair, a_unary, v};
  };

  const auto [ap_sal, au_sal, v_sal] = task_affinity(f_sal_in, "proj_sal");
  const auto [ap_seg, au_seg, v_seg] = task_affinity(f_seg_in, "proj_seg");

  // residual feature enhancement: F_out = F^p + F^u + F_in
  auto enhance = [&](ad::Value f_in, ad::Value a_pair, ad::Value a_unary,
                     ad::Value v) {
    const ad::Value f_p = g.matmul(v, g.transpose2d(a_pair));          // D x N
    const ad::Value ctx = g.matmul(a_unary, g.transpose2d(v));         // 1 x D
    const ad::Value f_u = g.broadcast_cols(g.transpose2d(ctx), n);     // D x N
    return g.reshape(g.add3(f_p, f_u, g.reshape(f_in, Shape{d, n})),
                     Shape{d, out.fh, out.fw});
  };

  const ad::Value f_sal_out = enhance(f_sal_in, ap_sal, au_sal, v_sal);
  const ad::Value f_seg_out = enhance(f_seg_in, ap_seg, au_seg, v_seg);

  // self-attention fusion into cross-task affinities
  auto fuse = [&](ad::Value a, ad::Value b, const std::string& which,
                  int renorm_axis) {
    const ad::Value stacked = g.stack2(a, b);  // 2 x M x 1
    const ad::Value hidden = g.relu(g.channel_mix(
        stacked, L.at("fusion." + which + "1.w"), L.at("fusion." + which + "1.b")));
    const ad::Value logits = g.channel_mix(
        hidden, L.at("fusion." + which + "2.w"), L.at("fusion." + which + "2.b"));
    const int mm = static_cast<int>(g.value(a).size());
    const ad::Value weights =
        g.softmax2d(g.reshape(logits, Shape{2, mm}), 0);  // channel softmax
    const ad::Value mixed = g.fuse_mix(weights, a, b);
    return g.normalize_axis(mixed, renorm_axis);
  };

  out.a_ct_pair = fuse(ap_sal, ap_seg, "pair", 1);     // rows sum to 1
  out.a_ct_unary = fuse(au_sal, au_seg, "unary", 1);   // single row sums to 1

  // predictions
  out.p_sal = g.sigmoid(g.reshape(
      g.channel_mix(f_sal_out, L.at("sal_out.w"), L.at("sal_out.b")),
      Shape{1, n}));
  out.p_seg = g.softmax2d(
      g.reshape(g.channel_mix(f_seg_out, L.at("seg_out.w"), L.at("seg_out.b")),
                Shape{c + 1, n}),
      0);

  // refined predictions; unary-refined outputs are re-normalized so the BCE
  // and CE losses see probabilities. For segmentation that is the per-pixel
  // simplex renormalization; for saliency the foreground/background pair
  // (p + ctx, (1-p) + (1-ctx)) renormalizes to exactly (p + ctx) / 2.
  auto refine_u = [&](ad::Value p, bool simplex) {
    const ad::Value ctx = g.matmul(p, g.transpose2d(out.a_ct_unary));  // C' x 1
    const ad::Value sum = g.add(p, g.broadcast_cols(ctx, n));
    return simplex ? g.normalize_cols(sum) : g.scale(sum, 0.5);
  };
  out.p_sal_ref_u = refine_u(out.p_sal, false);
  out.p_seg_ref_u = refine_u(out.p_seg, true);
  out.p_sal_ref_p = g.matmul(out.p_sal, g.transpose2d(out.a_ct_pair));
  out.p_seg_ref_p = g.matmul(out.p_seg, g.transpose2d(out.a_ct_pair));
  return out;
}

// ---------------------------------------------------------------------------
// Plain-tensor forward for inference and tests.

struct MultiTaskOutput {
  Tensor logits;  // C
  CamStack cam;   // normalized, C x h x w
  Tensor p_sal;   // 1 x h x w
  Tensor p_seg;   // (C+1) x h x w
  Tensor p_sal_ref_u, p_sal_ref_p;
  Tensor p_seg_ref_u, p_seg_ref_p;
  PairwiseAffinity a_ct_pairwise;
  UnaryAffinity a_ct_unary;
  int fh = 0, fw = 0;
};

inline MultiTaskOutput forward_multitask(const ToyModel& m, const Tensor& image) {
  ad::Graph g;
  const FullForward f = build_full_graph(g, m, image, false);
  const int c1 = m.cfg.num_fg_classes + 1;
  const Shape sal_shape{1, f.fh, f.fw};
  const Shape seg_shape{c1, f.fh, f.fw};

  Tensor unary_flat = g.value_tensor(f.a_ct_unary);
  return MultiTaskOutput{
      g.value_tensor(f.logits),
      normalize_cam(compute_cam(g.value_tensor(f.features), m.classifier())),
      reshape(g.value_tensor(f.p_sal), sal_shape),
      reshape(g.value_tensor(f.p_seg), seg_shape),
      reshape(g.value_tensor(f.p_sal_ref_u), sal_shape),
      reshape(g.value_tensor(f.p_sal_ref_p), sal_shape),
      reshape(g.value_tensor(f.p_seg_ref_u), seg_shape),
      reshape(g.value_tensor(f.p_seg_ref_p), seg_shape),
      PairwiseAffinity(g.value_tensor(f.a_ct_pair), f.fh, f.fw),
      UnaryAffinity(reshape(unary_flat, Shape{f.fh * f.fw}), f.fh, f.fw),
      f.fh, f.fw};
}

}  // namespace affseg
