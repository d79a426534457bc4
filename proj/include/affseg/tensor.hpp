// Dense f32 tensor substrate: shapes, elementwise math, matrix product,
// 1x1 channel mixing, spatial softmax, bilinear resizing and the two CAM
// normalizations. Everything is value-semantic and single-threaded;
// reductions run in row-major order so results are bit-reproducible.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace affseg {

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) : Shape(std::vector<int>(dims)) {}
  explicit Shape(std::vector<int> dims) : dims_(std::move(dims)) {
    for (int d : dims_) {
      if (d < 1) {
        throw std::invalid_argument("Shape: extents must be >= 1, got " +
                                    std::to_string(d));
      }
    }
  }

  int rank() const { return static_cast<int>(dims_.size()); }

  int extent(int axis) const {
    if (axis < 0 || axis >= rank()) {
      throw std::invalid_argument("Shape: axis out of range");
    }
    return dims_[static_cast<std::size_t>(axis)];
  }

  std::size_t elements() const {
    std::size_t n = 1;
    for (int d : dims_) n *= static_cast<std::size_t>(d);
    return n;
  }

  const std::vector<int>& dims() const { return dims_; }

  bool operator==(const Shape& other) const { return dims_ == other.dims_; }
  bool operator!=(const Shape& other) const { return !(*this == other); }

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

 private:
  std::vector<int> dims_;
};

// Row-major dense f32 array. The validating constructor rejects NaN/Inf;
// tensors produced by the operations below are built from zero-filled
// storage and finite inputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_.elements(), 0.0f) {}

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.elements()) {
      throw std::invalid_argument("Tensor: data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_.str());
    }
    for (float v : data_) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument("Tensor: non-finite value rejected");
      }
    }
  }

  static Tensor full(Shape shape, float value) {
    if (!std::isfinite(value)) {
      throw std::invalid_argument("Tensor: non-finite value rejected");
    }
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return shape_.rank(); }
  int extent(int axis) const { return shape_.extent(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  float at(int i) const { return data_[idx1(i)]; }
  float& at(int i) { return data_[idx1(i)]; }
  float at(int i, int j) const { return data_[idx2(i, j)]; }
  float& at(int i, int j) { return data_[idx2(i, j)]; }
  float at(int c, int i, int j) const { return data_[idx3(c, i, j)]; }
  float& at(int c, int i, int j) { return data_[idx3(c, i, j)]; }

 private:
  std::size_t idx1(int i) const { return static_cast<std::size_t>(i); }
  std::size_t idx2(int i, int j) const {
    return static_cast<std::size_t>(i) * shape_.extent(1) + j;
  }
  std::size_t idx3(int c, int i, int j) const {
    return (static_cast<std::size_t>(c) * shape_.extent(1) + i) *
               shape_.extent(2) +
           j;
  }

  Shape shape_;
  std::vector<float> data_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise helpers

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " +
                                              a.shape().str() + " vs " +
                                              b.shape().str());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "hadamard: shape mismatch");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline Tensor scale(const Tensor& a, float s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0f ? a[i] : 0.0f;
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    // split by sign to avoid exp overflow
    float x = a[i];
    out[i] = x >= 0.0f ? 1.0f / (1.0f + std::exp(-x))
                       : std::exp(x) / (1.0f + std::exp(x));
  }
  return out;
}

inline float sum(const Tensor& a) {
  float s = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
  return s;
}

inline float max_value(const Tensor& a) {
  float m = a[0];
  for (std::size_t i = 1; i < a.size(); ++i) m = std::max(m, a[i]);
  return m;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  detail::require(shape.elements() == a.size(),
                  "reshape: element count mismatch");
  return Tensor(std::move(shape), a.vec());
}

// ---------------------------------------------------------------------------
// Matrix product, deterministic row-major accumulation.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: inputs must be 2D");
  const int m = a.extent(0), k = a.extent(1);
  const int k2 = b.extent(0), n = b.extent(1);
  detail::require(k == k2, "matmul: inner extents mismatch " +
                               a.shape().str() + " vs " + b.shape().str());
  Tensor out(Shape{m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = out.data();
  for (int i = 0; i < m; ++i) {
    float* crow = pc + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const float av = pa[static_cast<std::size_t>(i) * k + l];
      if (av == 0.0f) continue;
      const float* brow = pb + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require(a.rank() == 2, "transpose: input must be 2D");
  const int m = a.extent(0), n = a.extent(1);
  Tensor out(Shape{n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Softmax along one axis: exp(x - max) / sum, stable under shifts.

inline Tensor softmax(const Tensor& a, int axis) {
  detail::require(axis >= 0 && axis < a.rank(), "softmax: axis out of range");
  const auto& dims = a.shape().dims();
  std::size_t inner = 1, outer = 1;
  for (int d = axis + 1; d < a.rank(); ++d) inner *= dims[d];
  for (int d = 0; d < axis; ++d) outer *= dims[d];
  const std::size_t ax = static_cast<std::size_t>(dims[axis]);

  Tensor out(a.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * ax * inner + in;
      float mx = a[base];
      for (std::size_t j = 1; j < ax; ++j)
        mx = std::max(mx, a[base + j * inner]);
      // double accumulation keeps slice sums within ~1e-7 of one even for
      // thousands of entries
      double total = 0.0;
      for (std::size_t j = 0; j < ax; ++j) {
        const float e = std::exp(a[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      const float inv = static_cast<float>(1.0 / total);
      for (std::size_t j = 0; j < ax; ++j) out[base + j * inner] *= inv;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-pixel affine map across channels (the 1x1 convolution of the paper's
// projection layers). x: Din x H x W, weights: Dout x Din, bias: Dout.

inline Tensor channel_mix(const Tensor& x, const Tensor& weights,
                          const Tensor& bias) {
  detail::require(x.rank() == 3, "channel_mix: input must be C x H x W");
  detail::require(weights.rank() == 2, "channel_mix: weights must be 2D");
  detail::require(bias.rank() == 1, "channel_mix: bias must be 1D");
  const int din = x.extent(0), h = x.extent(1), w = x.extent(2);
  const int dout = weights.extent(0);
  detail::require(weights.extent(1) == din,
                  "channel_mix: channel mismatch, weights expect " +
                      std::to_string(weights.extent(1)) + " input channels, got " +
                      std::to_string(din));
  detail::require(bias.extent(0) == dout, "channel_mix: bias extent mismatch");

  Tensor out(Shape{dout, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int o = 0; o < dout; ++o) {
    float* orow = out.data() + static_cast<std::size_t>(o) * hw;
    const float b = bias.at(o);
    for (std::size_t p = 0; p < hw; ++p) orow[p] = b;
    for (int c = 0; c < din; ++c) {
      const float wv = weights.at(o, c);
      if (wv == 0.0f) continue;
      const float* xrow = x.data() + static_cast<std::size_t>(c) * hw;
      for (std::size_t p = 0; p < hw; ++p) orow[p] += wv * xrow[p];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corner-aligned bilinear resize (identity when the size is unchanged).

inline Tensor bilinear_resize(const Tensor& x, int new_h, int new_w) {
  detail::require(x.rank() == 3, "bilinear_resize: input must be C x H x W");
  detail::require(new_h >= 1 && new_w >= 1,
                  "bilinear_resize: target extents must be >= 1");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  if (new_h == h && new_w == w) return x;

  Tensor out(Shape{c, new_h, new_w});
  const float sy = new_h > 1 ? static_cast<float>(h - 1) / (new_h - 1) : 0.0f;
  const float sx = new_w > 1 ? static_cast<float>(w - 1) / (new_w - 1) : 0.0f;
  for (int i = 0; i < new_h; ++i) {
    const float fy = i * sy;
    const int y0 = std::min(static_cast<int>(fy), h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const float wy = fy - y0;
    for (int j = 0; j < new_w; ++j) {
      const float fx = j * sx;
      const int x0 = std::min(static_cast<int>(fx), w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const float wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const float v00 = x.at(ch, y0, x0);
        const float v01 = x.at(ch, y0, x1);
        const float v10 = x.at(ch, y1, x0);
        const float v11 = x.at(ch, y1, x1);
        const float top = v00 + (v01 - v00) * wx;
        const float bot = v10 + (v11 - v10) * wx;
        out.at(ch, i, j) = top + (bot - top) * wy;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-slice normalizations. A rank-1 tensor is treated as a single slice;
// higher ranks normalize each leading-axis slice over its remaining axes.

namespace detail {

inline std::pair<std::size_t, std::size_t> slice_layout(const Tensor& x) {
  if (x.rank() <= 1) return {1, x.size()};
  const std::size_t slices = static_cast<std::size_t>(x.extent(0));
  return {slices, x.size() / slices};
}

}  // namespace detail

constexpr float kRangeEps = 1e-12f;

// (x - min) / (max - min); a slice with a degenerate range maps to zeros.
inline Tensor minmax_normalize(const Tensor& x) {
  auto [slices, stride] = detail::slice_layout(x);
  Tensor out(x.shape());
  for (std::size_t s = 0; s < slices; ++s) {
    const float* src = x.data() + s * stride;
    float* dst = out.data() + s * stride;
    float lo = src[0], hi = src[0];
    for (std::size_t i = 1; i < stride; ++i) {
      lo = std::min(lo, src[i]);
      hi = std::max(hi, src[i]);
    }
    const float range = hi - lo;
    if (range < kRangeEps) continue;  // stays zero
    for (std::size_t i = 0; i < stride; ++i) dst[i] = (src[i] - lo) / range;
  }
  return out;
}

// clamp negatives to zero, then divide by the per-slice spatial max;
// an (almost) all-zero slice stays zero.
inline Tensor max_normalize(const Tensor& x) {
  auto [slices, stride] = detail::slice_layout(x);
  Tensor out(x.shape());
  for (std::size_t s = 0; s < slices; ++s) {
    const float* src = x.data() + s * stride;
    float* dst = out.data() + s * stride;
    float hi = 0.0f;
    for (std::size_t i = 0; i < stride; ++i)
      hi = std::max(hi, src[i]);
    if (hi < kRangeEps) continue;
    for (std::size_t i = 0; i < stride; ++i)
      dst[i] = src[i] > 0.0f ? src[i] / hi : 0.0f;
  }
  return out;
}

}  // namespace affseg
