#include <gtest/gtest.h>

#include <cmath>

#include "affseg/affinity.hpp"
#include "affseg/rng.hpp"

using namespace affseg;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_range(lo, hi);
  return t;
}

ChannelMix random_mix(Rng& rng, int dout, int din) {
  return ChannelMix{random_tensor(rng, Shape{dout, din}),
                    random_tensor(rng, Shape{dout}, -0.2f, 0.2f)};
}

ProjectionParams random_projection(Rng& rng, int d) {
  return ProjectionParams{random_mix(rng, d, d), random_mix(rng, d, d),
                          random_mix(rng, d, d), random_mix(rng, 1, d)};
}

FusionParams random_fusion(Rng& rng, int hidden = 4) {
  return FusionParams{random_mix(rng, hidden, 2), random_mix(rng, 2, hidden),
                      random_mix(rng, hidden, 2), random_mix(rng, 2, hidden)};
}

// fusion params whose weight maps are the constant pair (w1, w2)
FusionParams constant_fusion(float w1, float w2, int hidden = 4) {
  FusionParams fp = zero_fusion(hidden);
  fp.pair2.bias.at(0) = std::log(w1);
  fp.pair2.bias.at(1) = std::log(w2);
  fp.unary2.bias.at(0) = std::log(w1);
  fp.unary2.bias.at(1) = std::log(w2);
  return fp;
}

PairwiseAffinity affinity_from_rows(std::vector<std::vector<float>> rows,
                                    int h, int w) {
  const int n = h * w;
  Tensor m(Shape{n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m.at(i, j) = rows[i][j];
  return PairwiseAffinity(std::move(m), h, w);
}

}  // namespace

TEST(PairwiseAffinity, ZeroLogitsGiveUniformRows) {
  Rng rng(7);
  const Tensor f = random_tensor(rng, Shape{3, 2, 2});
  const PairwiseAffinity a = pairwise_affinity(f, zero_projection(3));
  const float expect = 1.0f / 4.0f;
  for (std::size_t i = 0; i < a.matrix.size(); ++i)
    EXPECT_NEAR(a.matrix[i], expect, 1e-6f);
}

TEST(PairwiseAffinity, SinglePositionIsOne) {
  Rng rng(8);
  const Tensor f = random_tensor(rng, Shape{3, 1, 1});
  const PairwiseAffinity a = pairwise_affinity(f, random_projection(rng, 3));
  ASSERT_EQ(a.matrix.size(), 1u);
  EXPECT_FLOAT_EQ(a.matrix[0], 1.0f);
}

TEST(PairwiseAffinity, TwoPixelMatchesBruteForce) {
  Rng rng(9);
  const int d = 3;
  const Tensor f = random_tensor(rng, Shape{d, 1, 2});
  const ProjectionParams proj = random_projection(rng, d);
  const PairwiseAffinity a = pairwise_affinity(f, proj);

  // brute-force: project each pixel independently, form the 2x2 logit matrix,
  // softmax each row by direct exponentiation
  float q[2][3], k[2][3];
  for (int p = 0; p < 2; ++p)
    for (int o = 0; o < d; ++o) {
      float qv = proj.q.bias.at(o), kv = proj.k.bias.at(o);
      for (int c = 0; c < d; ++c) {
        qv += proj.q.weight.at(o, c) * f.at(c, 0, p);
        kv += proj.k.weight.at(o, c) * f.at(c, 0, p);
      }
      q[p][o] = qv;
      k[p][o] = kv;
    }
  for (int i = 0; i < 2; ++i) {
    float logit[2];
    for (int j = 0; j < 2; ++j) {
      logit[j] = 0.0f;
      for (int o = 0; o < d; ++o) logit[j] += q[i][o] * k[j][o];
    }
    const float e0 = std::exp(logit[0]), e1 = std::exp(logit[1]);
    EXPECT_NEAR(a.matrix.at(i, 0), e0 / (e0 + e1), 1e-5f);
    EXPECT_NEAR(a.matrix.at(i, 1), e1 / (e0 + e1), 1e-5f);
  }
}

TEST(AggregatePairwise, IdentityRowsReturnValues) {
  Rng rng(10);
  const Tensor v = random_tensor(rng, Shape{3, 2, 2});
  Tensor eye(Shape{4, 4});
  for (int i = 0; i < 4; ++i) eye.at(i, i) = 1.0f;
  const Tensor out = aggregate_pairwise(PairwiseAffinity(eye, 2, 2), v);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(out[i], v[i], 1e-6f);
}

TEST(AggregatePairwise, UniformRowsGiveSpatialMean) {
  Rng rng(11);
  const Tensor v = random_tensor(rng, Shape{2, 2, 2});
  const Tensor uniform = Tensor::full(Shape{4, 4}, 0.25f);
  const Tensor out = aggregate_pairwise(PairwiseAffinity(uniform, 2, 2), v);
  for (int c = 0; c < 2; ++c) {
    float mean = 0.0f;
    for (int p = 0; p < 4; ++p) mean += v[c * 4 + p];
    mean /= 4.0f;
    for (int p = 0; p < 4; ++p) EXPECT_NEAR(out[c * 4 + p], mean, 1e-6f);
  }
}

TEST(AggregatePairwise, SelectorRowsBroadcastOnePosition) {
  Rng rng(12);
  const Tensor v = random_tensor(rng, Shape{2, 1, 3});
  const int target = 2;
  Tensor sel(Shape{3, 3});
  for (int i = 0; i < 3; ++i) sel.at(i, target) = 1.0f;
  const Tensor out = aggregate_pairwise(PairwiseAffinity(sel, 1, 3), v);
  for (int c = 0; c < 2; ++c)
    for (int p = 0; p < 3; ++p)
      EXPECT_NEAR(out[c * 3 + p], v[c * 3 + target], 1e-6f);
}

TEST(UnaryAffinity, ZeroProjectionGivesUniform) {
  Rng rng(13);
  const Tensor f = random_tensor(rng, Shape{2, 2, 3});
  const UnaryAffinity u = unary_affinity(f, zero_projection(2));
  for (std::size_t i = 0; i < u.map.size(); ++i)
    EXPECT_NEAR(u.map[i], 1.0f / 6.0f, 1e-6f);
}

TEST(UnaryAffinity, SinglePositionIsOne) {
  Rng rng(14);
  const Tensor f = random_tensor(rng, Shape{2, 1, 1});
  const UnaryAffinity u = unary_affinity(f, random_projection(rng, 2));
  ASSERT_EQ(u.map.size(), 1u);
  EXPECT_FLOAT_EQ(u.map[0], 1.0f);
}

TEST(UnaryAffinity, HandSoftmaxOfTwoLogits) {
  // features chosen so the unary logits are [0, ln 3] -> map [0.25, 0.75]
  Tensor f(Shape{1, 1, 2}, {0.0f, std::log(3.0f)});
  ProjectionParams proj = zero_projection(1);
  proj.u.weight.at(0, 0) = 1.0f;
  const UnaryAffinity u = unary_affinity(f, proj);
  EXPECT_NEAR(u.map[0], 0.25f, 1e-6f);
  EXPECT_NEAR(u.map[1], 0.75f, 1e-6f);
}

TEST(AggregateUnary, SelectorBroadcastsOnePosition) {
  Rng rng(15);
  const Tensor v = random_tensor(rng, Shape{3, 1, 4});
  Tensor onehot(Shape{4});
  onehot.at(1) = 1.0f;
  const Tensor out = aggregate_unary(UnaryAffinity(onehot, 1, 4), v);
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 4; ++p)
      EXPECT_NEAR(out[c * 4 + p], v[c * 4 + 1], 1e-6f);
}

TEST(AggregateUnary, UniformGivesSpatialMean) {
  Rng rng(16);
  const Tensor v = random_tensor(rng, Shape{2, 2, 2});
  const Tensor uniform = Tensor::full(Shape{4}, 0.25f);
  const Tensor out = aggregate_unary(UnaryAffinity(uniform, 2, 2), v);
  for (int c = 0; c < 2; ++c) {
    float mean = 0.0f;
    for (int p = 0; p < 4; ++p) mean += v[c * 4 + p];
    mean /= 4.0f;
    for (int p = 0; p < 4; ++p) EXPECT_NEAR(out[c * 4 + p], mean, 1e-6f);
  }
}

TEST(AggregateUnary, ConstantValuesPassThrough) {
  Rng rng(17);
  Tensor weights = random_tensor(rng, Shape{4}, 0.0f, 1.0f);
  float total = 0.0f;
  for (std::size_t i = 0; i < weights.size(); ++i) total += weights[i];
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] /= total;
  const Tensor v = Tensor::full(Shape{2, 2, 2}, 0.7f);
  const Tensor out = aggregate_unary(UnaryAffinity(weights, 2, 2), v);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], 0.7f, 1e-6f);
}

TEST(FusePairwise, SaturatedWeightsSelectFirstInput) {
  const auto a_sal = affinity_from_rows({{0.9f, 0.1f}, {0.3f, 0.7f}}, 1, 2);
  const auto a_seg = affinity_from_rows({{0.2f, 0.8f}, {0.6f, 0.4f}}, 1, 2);
  FusionParams fp = zero_fusion();
  fp.pair2.bias.at(0) = 40.0f;  // softmax saturates onto channel 1
  fp.pair2.bias.at(1) = -40.0f;
  const PairwiseAffinity fused = fuse_pairwise(a_sal, a_seg, fp);
  for (std::size_t i = 0; i < fused.matrix.size(); ++i)
    EXPECT_NEAR(fused.matrix[i], a_sal.matrix[i], 1e-5f);
}

TEST(FusePairwise, EqualInputsAreFixedPoint) {
  Rng rng(18);
  const Tensor f = random_tensor(rng, Shape{3, 2, 2});
  const PairwiseAffinity a = pairwise_affinity(f, random_projection(rng, 3));
  const PairwiseAffinity fused = fuse_pairwise(a, a, random_fusion(rng));
  for (std::size_t i = 0; i < a.matrix.size(); ++i)
    EXPECT_NEAR(fused.matrix[i], a.matrix[i], 1e-5f);
}

TEST(FusePairwise, HandConvexMixThenRowRenormalization) {
  const auto a_sal = affinity_from_rows({{0.9f, 0.1f}, {0.3f, 0.7f}}, 1, 2);
  const auto a_seg = affinity_from_rows({{0.2f, 0.8f}, {0.6f, 0.4f}}, 1, 2);
  const PairwiseAffinity fused =
      fuse_pairwise(a_sal, a_seg, constant_fusion(0.3f, 0.7f));
  // brute-force arithmetic: 0.3 * a_sal + 0.7 * a_seg, rows re-normalized
  for (int i = 0; i < 2; ++i) {
    float mixed[2];
    for (int j = 0; j < 2; ++j)
      mixed[j] = 0.3f * a_sal.matrix.at(i, j) + 0.7f * a_seg.matrix.at(i, j);
    const float s = mixed[0] + mixed[1];
    EXPECT_NEAR(fused.matrix.at(i, 0), mixed[0] / s, 1e-5f);
    EXPECT_NEAR(fused.matrix.at(i, 1), mixed[1] / s, 1e-5f);
  }
}

TEST(FuseUnary, EqualInputsUnchangedAndSaturationSelects) {
  Rng rng(19);
  const Tensor f = random_tensor(rng, Shape{2, 1, 3});
  const UnaryAffinity u = unary_affinity(f, random_projection(rng, 2));
  const UnaryAffinity same = fuse_unary(u, u, random_fusion(rng));
  for (std::size_t i = 0; i < u.map.size(); ++i)
    EXPECT_NEAR(same.map[i], u.map[i], 1e-5f);

  const UnaryAffinity other =
      unary_affinity(random_tensor(rng, Shape{2, 1, 3}), random_projection(rng, 2));
  FusionParams fp = zero_fusion();
  fp.unary2.bias.at(0) = 40.0f;
  fp.unary2.bias.at(1) = -40.0f;
  const UnaryAffinity sel = fuse_unary(u, other, fp);
  for (std::size_t i = 0; i < u.map.size(); ++i)
    EXPECT_NEAR(sel.map[i], u.map[i], 1e-5f);
}

TEST(FuseUnary, HandConvexMix) {
  const UnaryAffinity u_sal(Tensor(Shape{2}, {0.9f, 0.1f}), 1, 2);
  const UnaryAffinity u_seg(Tensor(Shape{2}, {0.4f, 0.6f}), 1, 2);
  const UnaryAffinity fused =
      fuse_unary(u_sal, u_seg, constant_fusion(0.3f, 0.7f));
  float mixed[2];
  for (int j = 0; j < 2; ++j)
    mixed[j] = 0.3f * u_sal.map[j] + 0.7f * u_seg.map[j];
  const float s = mixed[0] + mixed[1];
  EXPECT_NEAR(fused.map[0], mixed[0] / s, 1e-5f);
  EXPECT_NEAR(fused.map[1], mixed[1] / s, 1e-5f);
}

TEST(DualAffinityForward, ZeroProjectionsAreResidualIdentity) {
  Rng rng(20);
  const Tensor f_sal = random_tensor(rng, Shape{3, 2, 2});
  const Tensor f_seg = random_tensor(rng, Shape{3, 2, 2});
  const DualAffinityOutput out = dual_affinity_forward(
      f_sal, f_seg, zero_projection(3), zero_projection(3), zero_fusion());
  for (std::size_t i = 0; i < f_sal.size(); ++i) {
    EXPECT_NEAR(out.f_sal_out[i], f_sal[i], 1e-6f);
    EXPECT_NEAR(out.f_seg_out[i], f_seg[i], 1e-6f);
  }
}

TEST(DualAffinityForward, SinglePositionAlgebra) {
  // H = W = 1: both affinities collapse to 1, so F_out = 2 V(F_in) + F_in
  Rng rng(21);
  const int d = 3;
  const Tensor f_sal = random_tensor(rng, Shape{d, 1, 1});
  const Tensor f_seg = random_tensor(rng, Shape{d, 1, 1});
  const ProjectionParams ps = random_projection(rng, d);
  const ProjectionParams pg = random_projection(rng, d);
  const DualAffinityOutput out =
      dual_affinity_forward(f_sal, f_seg, ps, pg, random_fusion(rng));

  EXPECT_FLOAT_EQ(out.a_ct_pairwise.matrix[0], 1.0f);
  EXPECT_FLOAT_EQ(out.a_ct_unary.map[0], 1.0f);
  const Tensor v_sal = ps.v(f_sal);
  const Tensor v_seg = pg.v(f_seg);
  for (int c = 0; c < d; ++c) {
    EXPECT_NEAR(out.f_sal_out[c], 2.0f * v_sal[c] + f_sal[c], 1e-5f);
    EXPECT_NEAR(out.f_seg_out[c], 2.0f * v_seg[c] + f_seg[c], 1e-5f);
  }
}

TEST(DualAffinityForward, ShapeContract) {
  Rng rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = rng.uniform_int(1, 5);
    const int h = rng.uniform_int(1, 4);
    const int w = rng.uniform_int(1, 4);
    const Tensor f_sal = random_tensor(rng, Shape{d, h, w});
    const Tensor f_seg = random_tensor(rng, Shape{d, h, w});
    const DualAffinityOutput out =
        dual_affinity_forward(f_sal, f_seg, random_projection(rng, d),
                              random_projection(rng, d), random_fusion(rng));
    EXPECT_EQ(out.f_sal_out.shape(), f_sal.shape());
    EXPECT_EQ(out.f_seg_out.shape(), f_seg.shape());
    EXPECT_EQ(out.a_ct_pairwise.h, h);
    EXPECT_EQ(out.a_ct_unary.positions(), h * w);
  }
}

// Properties ----------------------------------------------------------------

TEST(AffinityProperties, FusedRowsStochasticAndConvexPerEntry) {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const int d = rng.uniform_int(1, 8);
    const int h = rng.uniform_int(1, 8);
    const int w = rng.uniform_int(1, 8);
    const Tensor f_sal = random_tensor(rng, Shape{d, h, w});
    const Tensor f_seg = random_tensor(rng, Shape{d, h, w});
    const PairwiseAffinity a_sal =
        pairwise_affinity(f_sal, random_projection(rng, d));
    const PairwiseAffinity a_seg =
        pairwise_affinity(f_seg, random_projection(rng, d));
    const FusionParams fp = random_fusion(rng);

    // convexity before renormalization
    auto [w1, w2] =
        detail::fusion_weights(a_sal.matrix, a_seg.matrix, fp.pair1, fp.pair2);
    for (std::size_t i = 0; i < w1.size(); ++i) {
      const float lo = std::min(a_sal.matrix[i], a_seg.matrix[i]);
      const float hi = std::max(a_sal.matrix[i], a_seg.matrix[i]);
      const float mixed = w1[i] * a_sal.matrix[i] + w2[i] * a_seg.matrix[i];
      ASSERT_GE(mixed, lo - 1e-6f);
      ASSERT_LE(mixed, hi + 1e-6f);
    }

    // the constructor revalidates row sums; fused rows must satisfy them
    const PairwiseAffinity fused = fuse_pairwise(a_sal, a_seg, fp);
    const int n = fused.positions();
    for (int i = 0; i < n; ++i) {
      float s = 0.0f;
      for (int j = 0; j < n; ++j) s += fused.matrix.at(i, j);
      ASSERT_NEAR(s, 1.0f, 1e-5f);
    }
  }
}

TEST(AffinityProperties, UnaryAggregationIsPositionIndependent) {
  Rng rng(24);
  for (int trial = 0; trial < 50; ++trial) {
    const int d = rng.uniform_int(1, 6);
    const int h = rng.uniform_int(1, 6);
    const int w = rng.uniform_int(1, 6);
    const Tensor f = random_tensor(rng, Shape{d, h, w});
    const Tensor v = random_tensor(rng, Shape{d, h, w});
    const UnaryAffinity u = unary_affinity(f, random_projection(rng, d));
    const Tensor out = aggregate_unary(u, v);
    for (int c = 0; c < d; ++c)
      for (int p = 1; p < h * w; ++p)
        ASSERT_NEAR(out[c * h * w + p], out[c * h * w], 1e-6f);
  }
}

TEST(OpCount, PaperRatioAtD128) {
  const OpCount c = op_count(32, 32, 128, AffinityVariant::kDual);
  EXPECT_DOUBLE_EQ(c.ratio(), 1.0 / 128.0);
  EXPECT_NEAR(c.ratio() * 100.0, 0.8, 0.03);  // percent, within 0.03 points
}

TEST(OpCount, UnitDepthLimitAndHandArithmetic) {
  EXPECT_DOUBLE_EQ(op_count(5, 3, 1, AffinityVariant::kDual).ratio(), 1.0);

  const OpCount c = op_count(8, 8, 4, AffinityVariant::kDual);
  EXPECT_EQ(c.base, 17408u);
  EXPECT_EQ(c.overhead, 4352u);

  const OpCount p = op_count(8, 8, 4, AffinityVariant::kPairwiseOnly);
  EXPECT_EQ(p.base, 17408u);
  EXPECT_EQ(p.overhead, 0u);
}

TEST(OpCount, RatioIsExactlyInverseDepth) {
  for (int d = 1; d <= 256; d += 3)
    for (int h : {1, 4, 16})
      EXPECT_DOUBLE_EQ(op_count(h, h + 1, d, AffinityVariant::kDual).ratio(),
                       1.0 / d);
}
