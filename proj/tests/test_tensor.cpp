#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "affseg/rng.hpp"
#include "affseg/tensor.hpp"
#include "affseg/tensor_io.hpp"

using namespace affseg;

namespace {

// Independent triple-loop product used as the matmul oracle.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor c(Shape{m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      float s = 0.0f;
      for (int l = 0; l < k; ++l) s += a.at(i, l) * b.at(l, j);
      c.at(i, j) = s;
    }
  return c;
}

Tensor random_tensor(Rng& rng, Shape shape, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_range(lo, hi);
  return t;
}

}  // namespace

TEST(Shape, RejectsNonPositiveExtents) {
  EXPECT_THROW(Shape({3, 0}), std::invalid_argument);
  EXPECT_THROW(Shape({-1}), std::invalid_argument);
  EXPECT_EQ(Shape({2, 3, 4}).elements(), 24u);
}

TEST(Tensor, RejectsNonFiniteAndLengthMismatch) {
  EXPECT_THROW(Tensor(Shape{2}, {1.0f, std::numeric_limits<float>::quiet_NaN()}),
               std::invalid_argument);
  EXPECT_THROW(Tensor(Shape{2}, {1.0f, std::numeric_limits<float>::infinity()}),
               std::invalid_argument);
  EXPECT_THROW(Tensor(Shape{3}, {1.0f, 2.0f}), std::invalid_argument);
}

TEST(Matmul, IdentityPassthrough) {
  const Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  const Tensor m(Shape{2, 2}, {1, 2, 3, 4});
  const Tensor out = matmul(eye, m);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_FLOAT_EQ(out[i], m[i]);
}

TEST(Matmul, HandDotProduct) {
  // [[1,1]] x [[2],[3]] = [[5]]
  const Tensor a(Shape{1, 2}, {1, 1});
  const Tensor b(Shape{2, 1}, {2, 3});
  const Tensor out = matmul(a, b);
  ASSERT_EQ(out.shape(), Shape({1, 1}));
  EXPECT_FLOAT_EQ(out[0], 5.0f);
}

TEST(Matmul, RejectsMismatchedInner) {
  const Tensor a(Shape{3, 2}, std::vector<float>(6, 1.0f));
  const Tensor b(Shape{3, 2}, std::vector<float>(6, 1.0f));
  EXPECT_THROW(matmul(a, b), std::invalid_argument);
  // degenerate zero extents are unrepresentable by construction
  EXPECT_THROW(Shape({3, 0}), std::invalid_argument);
}

TEST(Matmul, MatchesBruteForceOracleExactly) {
  Rng rng(1234);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = rng.uniform_int(1, 8);
    const int k = rng.uniform_int(1, 8);
    const int n = rng.uniform_int(1, 8);
    const Tensor a = random_tensor(rng, Shape{m, k});
    const Tensor b = random_tensor(rng, Shape{k, n});
    const Tensor got = matmul(a, b);
    const Tensor want = matmul_oracle(a, b);
    for (std::size_t i = 0; i < want.size(); ++i)
      ASSERT_EQ(got[i], want[i]) << "trial " << trial << " entry " << i;
  }
}

TEST(Softmax, SymmetricPair) {
  const Tensor x(Shape{2}, {1, 1});
  const Tensor y = softmax(x, 0);
  EXPECT_FLOAT_EQ(y[0], 0.5f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
}

TEST(Softmax, HandExponentiation) {
  // softmax([0, ln 3]) = [1/4, 3/4]
  const Tensor x(Shape{2}, {0.0f, std::log(3.0f)});
  const Tensor y = softmax(x, 0);
  EXPECT_NEAR(y[0], 0.25f, 1e-6f);
  EXPECT_NEAR(y[1], 0.75f, 1e-6f);
}

TEST(Softmax, LargeInputsDoNotOverflow) {
  const Tensor x(Shape{2}, {1000.0f, 1000.0f});
  const Tensor y = softmax(x, 0);
  EXPECT_FLOAT_EQ(y[0], 0.5f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
}

TEST(Softmax, SumsToOneAlongAxisForRandomShapes) {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const int rank = rng.uniform_int(1, 4);
    std::vector<int> dims;
    for (int d = 0; d < rank; ++d) dims.push_back(rng.uniform_int(1, 5));
    const Tensor x = random_tensor(rng, Shape(dims), -50.0f, 50.0f);
    const int axis = rng.uniform_int(0, rank - 1);
    const Tensor y = softmax(x, axis);

    std::size_t inner = 1, outer = 1;
    for (int d = axis + 1; d < rank; ++d) inner *= dims[d];
    for (int d = 0; d < axis; ++d) outer *= dims[d];
    const std::size_t ax = static_cast<std::size_t>(dims[axis]);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        float s = 0.0f;
        for (std::size_t j = 0; j < ax; ++j)
          s += y[o * ax * inner + j * inner + in];
        ASSERT_NEAR(s, 1.0f, 1e-6f);
      }
  }
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor(rng, Shape{6}, -10.0f, 10.0f);
    const float c = rng.uniform_range(-25.0f, 25.0f);
    Tensor shifted = x;
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += c;
    const Tensor a = softmax(x, 0);
    const Tensor b = softmax(shifted, 0);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-6f);
  }
}

TEST(ChannelMix, IdentityWeights) {
  Rng rng(5);
  const Tensor x = random_tensor(rng, Shape{2, 3, 3});
  const Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  const Tensor zero_bias(Shape{2});
  const Tensor y = channel_mix(x, eye, zero_bias);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_FLOAT_EQ(y[i], x[i]);
}

TEST(ChannelMix, HandRowSum) {
  // all-ones input, weight row [1, -1], zero bias -> all zeros
  const Tensor x = Tensor::full(Shape{2, 2, 2}, 1.0f);
  const Tensor w(Shape{1, 2}, {1.0f, -1.0f});
  const Tensor b(Shape{1});
  const Tensor y = channel_mix(x, w, b);
  ASSERT_EQ(y.shape(), Shape({1, 2, 2}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_FLOAT_EQ(y[i], 0.0f);
}

TEST(ChannelMix, RejectsChannelMismatch) {
  const Tensor x = Tensor::full(Shape{3, 2, 2}, 1.0f);
  const Tensor w(Shape{1, 2}, {1.0f, -1.0f});
  const Tensor b(Shape{1});
  EXPECT_THROW(channel_mix(x, w, b), std::invalid_argument);
}

TEST(BilinearResize, SameSizeIsBitwiseIdentity) {
  Rng rng(11);
  const Tensor x = random_tensor(rng, Shape{2, 5, 7});
  const Tensor y = bilinear_resize(x, 5, 7);
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(y[i], x[i]);
}

TEST(BilinearResize, ConstantStaysConstant) {
  const Tensor x = Tensor::full(Shape{1, 3, 4}, 0.37f);
  for (auto [h, w] : {std::pair{1, 1}, {7, 9}, {2, 11}}) {
    const Tensor y = bilinear_resize(x, h, w);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_FLOAT_EQ(y[i], 0.37f);
  }
}

TEST(BilinearResize, HandCornerAlignedUpsample) {
  // 1x2 map [0,1] -> 1x3 gives [0, 0.5, 1]
  const Tensor x(Shape{1, 1, 2}, {0.0f, 1.0f});
  const Tensor y = bilinear_resize(x, 1, 3);
  ASSERT_EQ(y.shape(), Shape({1, 1, 3}));
  EXPECT_FLOAT_EQ(y[0], 0.0f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
  EXPECT_FLOAT_EQ(y[2], 1.0f);
}

TEST(MinMaxNormalize, HandArithmetic) {
  const Tensor x(Shape{3}, {2, 4, 6});
  const Tensor y = minmax_normalize(x);
  EXPECT_FLOAT_EQ(y[0], 0.0f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
  EXPECT_FLOAT_EQ(y[2], 1.0f);
}

TEST(MinMaxNormalize, ConstantSliceMapsToZero) {
  const Tensor x = Tensor::full(Shape{2, 2, 2}, 3.5f);
  const Tensor y = minmax_normalize(x);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_FLOAT_EQ(y[i], 0.0f);
}

TEST(MinMaxNormalize, AlreadyNormalizedUnchanged) {
  const Tensor x(Shape{3}, {0.0f, 0.25f, 1.0f});
  const Tensor y = minmax_normalize(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_FLOAT_EQ(y[i], x[i]);
}

TEST(MaxNormalize, HandDivision) {
  const Tensor x(Shape{3}, {1, 2, 4});
  const Tensor y = max_normalize(x);
  EXPECT_FLOAT_EQ(y[0], 0.25f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
  EXPECT_FLOAT_EQ(y[2], 1.0f);
}

TEST(MaxNormalize, AllZeroSliceGuarded) {
  const Tensor x(Shape{2, 3});  // slice 0 zero, slice 1 live
  Tensor in = x;
  in.at(1, 0) = 2.0f;
  const Tensor y = max_normalize(in);
  EXPECT_FLOAT_EQ(y.at(0, 0), 0.0f);
  EXPECT_FLOAT_EQ(y.at(0, 2), 0.0f);
  EXPECT_FLOAT_EQ(y.at(1, 0), 1.0f);
}

TEST(MaxNormalize, ClampsNegativesBeforeDividing) {
  const Tensor x(Shape{2}, {-1.0f, 2.0f});
  const Tensor y = max_normalize(x);
  EXPECT_FLOAT_EQ(y[0], 0.0f);
  EXPECT_FLOAT_EQ(y[1], 1.0f);
}

TEST(Normalize, OutputsStayInUnitRange) {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor(rng, Shape{3, 4, 4}, -5.0f, 5.0f);
    for (const Tensor& y : {minmax_normalize(x), max_normalize(x)}) {
      for (std::size_t i = 0; i < y.size(); ++i) {
        ASSERT_GE(y[i], 0.0f);
        ASSERT_LE(y[i], 1.0f);
      }
    }
  }
}

TEST(TensorIo, RoundTripPreservesBits) {
  Rng rng(31337);
  const Tensor t = random_tensor(rng, Shape{3, 4, 5}, -10.0f, 10.0f);
  const auto path = std::filesystem::temp_directory_path() / "affseg_rt.axt";
  write_tensor(path, t);
  const Tensor back = read_tensor(path);
  ASSERT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) ASSERT_EQ(back[i], t[i]);
  std::filesystem::remove(path);
}

TEST(TensorIo, RejectsBadMagicAndMissingFile) {
  const auto path = std::filesystem::temp_directory_path() / "affseg_bad.axt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE garbage";
  }
  EXPECT_THROW(read_tensor(path), IoError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_tensor(path), IoError);
}

TEST(TensorIo, ManifestRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "affseg_manifest";
  std::filesystem::create_directories(dir);
  write_manifest(dir, {{"weights", "w.axt"}, {"bias", "b.axt"}});
  const auto entries = read_manifest(dir);
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].first, "weights");
  EXPECT_EQ(entries[1].second, "b.axt");
  std::filesystem::remove_all(dir);
}
