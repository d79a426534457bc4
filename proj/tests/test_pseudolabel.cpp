#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "affseg/pseudolabel.hpp"
#include "affseg/rng.hpp"

using namespace affseg;

namespace {

CamStack constant_cam(int classes, int h, int w, float value) {
  return CamStack{Tensor::full(Shape{classes, h, w}, value), true};
}

SaliencyMap constant_sal(int h, int w, float value) {
  return SaliencyMap(h, w, value);
}

Tensor random_image(Rng& rng, int h, int w) {
  Tensor t(Shape{3, h, w});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_range(0.f, 1.f);
  return t;
}

}  // namespace

TEST(GenerateSegPgt, PureForegroundLabelsEverything) {
  const CamStack cams = constant_cam(3, 4, 4, 0.9f);
  const SaliencyMap sal = constant_sal(4, 4, 1.0f);
  const LabelMap out = generate_seg_pgt(cams, sal, {2}, ThresholdConfig{});
  for (auto l : out.labels) EXPECT_EQ(l, 2);
}

TEST(GenerateSegPgt, PureBackgroundWhenBothWeak) {
  const CamStack cams = constant_cam(3, 4, 4, 0.1f);  // below 0.2
  const SaliencyMap sal = constant_sal(4, 4, 0.01f);  // below 0.06
  const LabelMap out = generate_seg_pgt(cams, sal, {1, 2}, ThresholdConfig{});
  for (auto l : out.labels) EXPECT_EQ(l, 0);
}

TEST(GenerateSegPgt, RuleTableOverAllCandidateCombinations) {
  // one pixel per combination: (fg,bg) in {(1,0),(0,1),(1,1),(0,0)}
  Tensor maps(Shape{1, 1, 4}, {0.5f, 0.1f, 0.5f, 0.1f});
  SaliencyMap sal(1, 4);
  sal.values = {0.5f, 0.01f, 0.01f, 0.5f};
  const LabelMap out = generate_seg_pgt(CamStack{maps, true}, sal, {1},
                                        ThresholdConfig{});
  EXPECT_EQ(out.labels[0], 1);                  // FG only
  EXPECT_EQ(out.labels[1], 0);                  // BG only
  EXPECT_EQ(out.labels[2], LabelMap::kIgnore);  // conflict
  EXPECT_EQ(out.labels[3], LabelMap::kIgnore);  // neither
}

TEST(GenerateSegPgt, EmptyClassSetDecidesBySaliencyAlone) {
  const CamStack cams = constant_cam(2, 2, 2, 0.9f);
  SaliencyMap sal(2, 2);
  sal.values = {0.01f, 0.5f, 0.02f, 0.9f};
  const LabelMap out = generate_seg_pgt(cams, sal, {}, ThresholdConfig{});
  EXPECT_EQ(out.labels[0], 0);
  EXPECT_EQ(out.labels[1], LabelMap::kIgnore);
  EXPECT_EQ(out.labels[2], 0);
  EXPECT_EQ(out.labels[3], LabelMap::kIgnore);
}

TEST(GenerateSegPgt, ArgmaxTieBreaksTowardLowestClass) {
  Tensor maps(Shape{3, 1, 1}, {0.8f, 0.8f, 0.8f});
  const LabelMap out = generate_seg_pgt(CamStack{maps, true},
                                        constant_sal(1, 1, 1.0f), {2, 3},
                                        ThresholdConfig{});
  EXPECT_EQ(out.labels[0], 2);  // lowest present class among the tied
}

TEST(GenerateSegPgt, EmitsOnlyPresentClassesBackgroundOrIgnore) {
  Rng rng(50);
  for (int trial = 0; trial < 30; ++trial) {
    const int h = rng.uniform_int(1, 6), w = rng.uniform_int(1, 6);
    Tensor maps(Shape{3, h, w});
    for (std::size_t i = 0; i < maps.size(); ++i)
      maps[i] = rng.uniform_range(0.0f, 1.0f);
    SaliencyMap sal(h, w);
    for (auto& v : sal.values) v = rng.uniform_range(0.0f, 1.0f);
    std::vector<int> present;
    for (int c = 1; c <= 3; ++c)
      if (rng.coin()) present.push_back(c);
    const LabelMap out = generate_seg_pgt(CamStack{maps, true}, sal, present,
                                          ThresholdConfig{});
    for (auto l : out.labels) {
      if (l == 0 || l == LabelMap::kIgnore) continue;
      bool found = false;
      for (int c : present) found |= (c == l);
      ASSERT_TRUE(found) << "emitted class " << int(l) << " not present";
    }
  }
}

TEST(GenerateSegPgt, ForegroundSetShrinksMonotonicallyInCamThreshold) {
  Rng rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 6, w = 6;
    Tensor maps(Shape{2, h, w});
    for (std::size_t i = 0; i < maps.size(); ++i)
      maps[i] = rng.uniform_range(0.0f, 1.0f);
    SaliencyMap sal(h, w);
    for (auto& v : sal.values) v = rng.uniform_range(0.0f, 1.0f);

    LabelMap prev;
    int prev_fg = -1;
    for (float ct : {0.2f, 0.25f, 0.3f, 0.35f}) {
      ThresholdConfig t;
      t.cam_thresh = ct;
      const LabelMap cur = generate_seg_pgt(CamStack{maps, true}, sal, {1, 2}, t);
      int fg = 0;
      for (auto l : cur.labels) fg += (l != 0 && l != LabelMap::kIgnore);
      if (prev_fg >= 0) {
        ASSERT_LE(fg, prev_fg);
        // no pixel may newly become foreground at a higher threshold
        for (std::size_t i = 0; i < cur.labels.size(); ++i) {
          const bool was_fg =
              prev.labels[i] != 0 && prev.labels[i] != LabelMap::kIgnore;
          const bool is_fg =
              cur.labels[i] != 0 && cur.labels[i] != LabelMap::kIgnore;
          if (is_fg) ASSERT_TRUE(was_fg);
        }
      }
      prev = cur;
      prev_fg = fg;
    }
  }
}

TEST(MeanFieldCrf, ZeroIterationsIsIdentity) {
  Rng rng(52);
  SaliencyMap unary(5, 5);
  for (auto& v : unary.values) v = rng.uniform_range(0.0f, 1.0f);
  CrfParams p;
  p.iterations = 0;
  const SaliencyMap out = mean_field_crf(unary, random_image(rng, 5, 5), p);
  for (std::size_t i = 0; i < unary.size(); ++i)
    ASSERT_EQ(out.values[i], unary.values[i]);
}

TEST(MeanFieldCrf, SymmetricFixedPointAtHalf) {
  const SaliencyMap unary = constant_sal(4, 4, 0.5f);
  const Tensor image = Tensor::full(Shape{3, 4, 4}, 0.3f);
  CrfParams p;
  p.iterations = 5;
  const SaliencyMap out = mean_field_crf(unary, image, p);
  for (auto v : out.values) ASSERT_FLOAT_EQ(v, 0.5f);
}

TEST(MeanFieldCrf, TwoPixelHandComputedIteration) {
  SaliencyMap unary(1, 2);
  unary.values = {0.8f, 0.3f};
  Tensor image(Shape{3, 1, 2}, {0.2f, 0.6f, 0.5f, 0.5f, 0.9f, 0.1f});
  CrfParams p;
  p.iterations = 1;
  const SaliencyMap out = mean_field_crf(unary, image, p);

  // brute-force dense message passing on the two pixels
  double di2 = 0.0;
  for (int c = 0; c < 3; ++c) {
    const double d = 255.0 * (image.at(c, 0, 0) - image.at(c, 0, 1));
    di2 += d * d;
  }
  const double k =
      p.spatial_weight * std::exp(-1.0 / (2.0 * p.spatial_sigma * p.spatial_sigma)) +
      p.bilateral_weight *
          std::exp(-1.0 / (2.0 * p.bilateral_spatial_sigma * p.bilateral_spatial_sigma)) *
          std::exp(-di2 / (2.0 * p.bilateral_range_sigma * p.bilateral_range_sigma));
  const double q0 = unary.values[0], q1 = unary.values[1];
  auto logit = [](double u) { return std::log(u) - std::log(1.0 - u); };
  auto sigma = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  const double want0 = sigma(logit(q0) + 2.0 * k * q1 - k);
  const double want1 = sigma(logit(q1) + 2.0 * k * q0 - k);
  EXPECT_NEAR(out.values[0], want0, 1e-6);
  EXPECT_NEAR(out.values[1], want1, 1e-6);
}

TEST(MeanFieldCrf, OutputInUnitRangeAndTotalVariationShrinks) {
  Rng rng(53);
  for (int trial = 0; trial < 5; ++trial) {
    SaliencyMap unary(12, 12);
    for (auto& v : unary.values) v = rng.uniform_range(0.0f, 1.0f);
    const Tensor image = Tensor::full(Shape{3, 12, 12}, 0.5f);
    CrfParams p;  // defaults: 5 iterations
    const SaliencyMap out = mean_field_crf(unary, image, p);
    for (auto v : out.values) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
    ASSERT_LE(total_variation(out), total_variation(unary));
  }
}

TEST(UpdateSalPgt, StageZeroIsBitwiseIdentity) {
  Rng rng(54);
  SaliencyMap pt(6, 6);
  for (auto& v : pt.values) v = rng.uniform_range(0.0f, 1.0f);
  const SaliencyMap out =
      update_sal_pgt(std::nullopt, pt, random_image(rng, 6, 6), CrfParams{}, 0);
  for (std::size_t i = 0; i < pt.size(); ++i)
    ASSERT_EQ(out.values[i], pt.values[i]);
}

TEST(UpdateSalPgt, ZeroIterationCrfPassesAverageThrough) {
  SaliencyMap prev(1, 2), pt(1, 2);
  prev.values = {0.2f, 0.8f};
  pt.values = {0.6f, 0.4f};
  CrfParams p;
  p.iterations = 0;
  const SaliencyMap out =
      update_sal_pgt(prev, pt, Tensor(Shape{3, 1, 2}), p, 1);
  EXPECT_FLOAT_EQ(out.values[0], 0.4f);
  EXPECT_FLOAT_EQ(out.values[1], 0.6f);
}

TEST(UpdateSalPgt, OneIterationMatchesDirectCrfOnAverage) {
  Rng rng(55);
  SaliencyMap prev(2, 2), pt(2, 2);
  for (auto& v : prev.values) v = rng.uniform_range(0.0f, 1.0f);
  for (auto& v : pt.values) v = rng.uniform_range(0.0f, 1.0f);
  const Tensor image = random_image(rng, 2, 2);
  CrfParams p;
  p.iterations = 1;
  const SaliencyMap got = update_sal_pgt(prev, pt, image, p, 1);

  SaliencyMap avg(2, 2);
  for (std::size_t i = 0; i < avg.size(); ++i)
    avg.values[i] = 0.5f * (prev.values[i] + pt.values[i]);
  const SaliencyMap want = mean_field_crf(avg, image, p);
  for (std::size_t i = 0; i < want.size(); ++i)
    ASSERT_FLOAT_EQ(got.values[i], want.values[i]);
}

TEST(UpdateSalPgt, LaterStageWithoutPreviousMapIsAnError) {
  const SaliencyMap pt = constant_sal(2, 2, 0.5f);
  EXPECT_THROW(
      update_sal_pgt(std::nullopt, pt, Tensor(Shape{3, 2, 2}), CrfParams{}, 1),
      std::invalid_argument);
}

TEST(LabelmapFromSaliency, ZerosAndClosedLowerBound) {
  const LabelMap zero = labelmap_from_saliency(constant_sal(2, 2, 0.0f), 0.5f);
  for (auto l : zero.labels) EXPECT_EQ(l, 0);

  const LabelMap at = labelmap_from_saliency(constant_sal(1, 1, 0.5f), 0.5f);
  EXPECT_EQ(at.labels[0], 1);  // exactly at the threshold counts as foreground
}

TEST(LabelmapFromSaliency, MatchesElementwiseRule) {
  Rng rng(56);
  SaliencyMap sal(4, 4);
  for (auto& v : sal.values) v = rng.uniform_range(0.0f, 1.0f);
  const float thresh = 0.37f;
  const LabelMap out = labelmap_from_saliency(sal, thresh);
  for (std::size_t i = 0; i < sal.size(); ++i)
    ASSERT_EQ(out.labels[i], sal.values[i] >= thresh ? 1 : 0);
}

TEST(PgmIo, LabelMapRoundTripsBitExactly) {
  LabelMap map(3, 4);
  map.labels = {0, 1, 2, 3, 255, 0, 1, 255, 2, 3, 0, 1};
  const auto path = std::filesystem::temp_directory_path() / "affseg_lbl.pgm";
  write_labelmap_pgm(path, map);
  const LabelMap back = read_labelmap_pgm(path);
  ASSERT_EQ(back.h, map.h);
  ASSERT_EQ(back.w, map.w);
  ASSERT_EQ(back.labels, map.labels);
  // file-level round trip: write the reread map and compare bytes
  const auto path2 = std::filesystem::temp_directory_path() / "affseg_lbl2.pgm";
  write_labelmap_pgm(path2, back);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {});
  const std::string sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(PgmIo, SaliencyQuantizesStably) {
  Rng rng(57);
  SaliencyMap sal(5, 5);
  for (auto& v : sal.values) v = rng.uniform_range(0.0f, 1.0f);
  const auto p1 = std::filesystem::temp_directory_path() / "affseg_sal1.pgm";
  const auto p2 = std::filesystem::temp_directory_path() / "affseg_sal2.pgm";
  write_saliency_pgm(p1, sal);
  const SaliencyMap once = read_saliency_pgm(p1);
  write_saliency_pgm(p2, once);
  const SaliencyMap twice = read_saliency_pgm(p2);
  for (std::size_t i = 0; i < once.size(); ++i)
    ASSERT_EQ(once.values[i], twice.values[i]);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}
