// Minimal reverse-mode tape for the multi-task trainer. Nodes store values
// and gradients in double so gradient checks against central finite
// differences are limited by truncation error, not by f32 rounding noise.
// Parameters and results cross the boundary as f32 tensors.
//
// Ops are appended in program order, so the tape order is topological and
// backward() is a single reverse sweep. Node references are never held
// across alloc(): appending can reallocate the tape.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "affseg/image_io.hpp"
#include "affseg/tensor.hpp"

namespace affseg::ad {

struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  Value leaf(const Tensor& t, bool requires_grad) {
    Node n;
    n.shape = t.shape();
    n.value.assign(t.data(), t.data() + t.size());
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  const Shape& shape(Value v) const { return node(v).shape; }
  const std::vector<double>& value(Value v) const { return node(v).value; }

  Tensor value_tensor(Value v) const {
    const Node& n = node(v);
    Tensor t(n.shape);
    for (std::size_t i = 0; i < n.value.size(); ++i)
      t[i] = static_cast<float>(n.value[i]);
    return t;
  }

  Tensor grad_tensor(Value v) const {
    const Node& n = node(v);
    Tensor t(n.shape);
    if (!n.grad.empty())
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        t[i] = static_cast<float>(n.grad[i]);
    return t;
  }

  double scalar(Value v) const {
    detail::require(node(v).value.size() == 1, "scalar: node is not scalar");
    return node(v).value[0];
  }

  // seed the (scalar) root with 1 and sweep the tape backwards
  void backward(Value root) {
    detail::require(node(root).value.size() == 1,
                    "backward: root must be a scalar");
    grad(root.id).assign(1, 1.0);
    for (int i = root.id; i >= 0; --i) {
      // backfn may allocate parent grads but never appends nodes
      if (nodes_[static_cast<std::size_t>(i)].backfn &&
          !nodes_[static_cast<std::size_t>(i)].grad.empty())
        nodes_[static_cast<std::size_t>(i)].backfn(*this, i);
    }
  }

  // --- elementwise ---------------------------------------------------------

  Value add(Value a, Value b) {
    detail::require(node(a).shape == node(b).shape, "ad::add: shape mismatch");
    Value out = alloc(node(a).shape, {a, b});
    const auto& va = node(a).value;
    const auto& vb = node(b).value;
    auto& v = node_mut(out).value;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = va[i] + vb[i];
    set_backfn(out, [a, b](Graph& g, int id) {
      const auto& go = g.grad(id);
      g.accumulate(a, go);
      g.accumulate(b, go);
    });
    return out;
  }

  Value add3(Value a, Value b, Value c) { return add(add(a, b), c); }

  Value scale(Value a, double s) {
    Value out = alloc(node(a).shape, {a});
    const auto& va = node(a).value;
    auto& v = node_mut(out).value;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = va[i] * s;
    set_backfn(out, [a, s](Graph& g, int id) {
      const auto& go = g.grad(id);
      auto& ga = g.grad_for(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += s * go[i];
    });
    return out;
  }

  Value relu(Value a) {
    Value out = alloc(node(a).shape, {a});
    const auto& va = node(a).value;
    auto& v = node_mut(out).value;
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = va[i] > 0.0 ? va[i] : 0.0;
    set_backfn(out, [a](Graph& g, int id) {
      const auto& go = g.grad(id);
      const auto& va = g.node(a).value;
      auto& ga = g.grad_for(a);
      for (std::size_t i = 0; i < go.size(); ++i)
        if (va[i] > 0.0) ga[i] += go[i];
    });
    return out;
  }

  Value sigmoid(Value a) {
    Value out = alloc(node(a).shape, {a});
    const auto& va = node(a).value;
    auto& v = node_mut(out).value;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = va[i];
      v[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
    }
    set_backfn(out, [a](Graph& g, int id) {
      const auto& go = g.grad(id);
      const auto& y = g.node(id).value;
      auto& ga = g.grad_for(a);
      for (std::size_t i = 0; i < go.size(); ++i)
        ga[i] += go[i] * y[i] * (1.0 - y[i]);
    });
    return out;
  }

  // out = w0 (.) a + w1 (.) b, with w holding the two weight maps stacked as
  // a 2 x M matrix. This is the convex-combination step of affinity fusion.
  Value fuse_mix(Value w, Value a, Value b) {
    const std::size_t m = node(a).value.size();
    detail::require(node(a).shape == node(b).shape,
                    "ad::fuse_mix: input shape mismatch");
    detail::require(node(w).value.size() == 2 * m,
                    "ad::fuse_mix: weights must be 2 x M");
    Value out = alloc(node(a).shape, {w, a, b});
    const auto& vw = node(w).value;
    const auto& va = node(a).value;
    const auto& vb = node(b).value;
    auto& v = node_mut(out).value;
    for (std::size_t i = 0; i < m; ++i)
      v[i] = vw[i] * va[i] + vw[m + i] * vb[i];
    set_backfn(out, [w, a, b, m](Graph& g, int id) {
      const auto& go = g.grad(id);
      const auto& vw = g.node(w).value;
      const auto& va = g.node(a).value;
      const auto& vb = g.node(b).value;
      auto& gw = g.grad_for(w);
      auto& ga = g.grad_for(a);
      auto& gb = g.grad_for(b);
      for (std::size_t i = 0; i < m; ++i) {
        gw[i] += go[i] * va[i];
        gw[m + i] += go[i] * vb[i];
        ga[i] += go[i] * vw[i];
        gb[i] += go[i] * vw[m + i];
      }
    });
    return out;
  }

  // --- shape plumbing --------------------------------------------------

  Value reshape(Value a, Shape s) {
    detail::require(s.elements() == node(a).value.size(),
                    "ad::reshape: element count mismatch");
    Value out = alloc(std::move(s), {a});
    node_mut(out).value = node(a).value;
    set_backfn(out, [a](Graph& g, int id) {
      const auto& go = g.grad(id);
      auto& ga = g.grad_for(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
    return out;
  }

  Value transpose2d(Value a) {
    detail::require(node(a).shape.rank() == 2, "ad::transpose2d: need 2D");
    const int m = node(a).shape.extent(0), n = node(a).shape.extent(1);
    Value out = alloc(Shape{n, m}, {a});
    const auto& va = node(a).value;
    auto& v = node_mut(out).value;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        v[static_cast<std::size_t>(j) * m + i] =
            va[static_cast<std::size_t>(i) * n + j];
    set_backfn(out, [a, m, n](Graph& g, int id) {
      const auto& go = g.grad(id);
      auto& ga = g.grad_for(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ga[static_cast<std::size_t>(i) * n + j] +=
              go[static_cast<std::size_t>(j) * m + i];
    });
    return out;
  }

  // two same-shape inputs stacked as a 2 x M x 1 block, ready for channel_mix
  Value stack2(Value a, Value b) {
    detail::require(node(a).shape == node(b).shape, "ad::stack2: shape mismatch");
    const int m = static_cast<int>(node(a).value.size());
    Value out = alloc(Shape{2, m, 1}, {a, b});
    const auto& va = node(a).value;
    const auto& vb = node(b).value;
    auto& v = node_mut(out).value;
    for (int i = 0; i < m; ++i) {
      v[static_cast<std::size_t>(i)] = va[static_cast<std::size_t>(i)];
      v[static_cast<std::size_t>(m) + i] = vb[static_cast<std::size_t>(i)];
    }
    set_backfn(out, [a, b, m](Graph& g, int id) {
      const auto& go = g.grad(id);
      auto& ga = g.grad_for(a);
      auto& gb = g.grad_for(b);
      for (int i = 0; i < m; ++i) {
        ga[static_cast<std::size_t>(i)] += go[static_cast<std::size_t>(i)];
        gb[static_cast<std::size_t>(i)] += go[static_cast<std::size_t>(m) + i];
      }
    });
    return out;
  }

  Value broadcast_cols(Value col, int n) {
    detail::require(node(col).shape.rank() == 2 &&
                        node(col).shape.extent(1) == 1,
                    "ad::broadcast_cols: need R x 1");
    const int r = node(col).shape.extent(0);
    Value out = alloc(Shape{r, n}, {col});
    const auto& vc = node(col).value;
    auto& v = node_mut(out).value;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < n; ++j)
        v[static_cast<std::size_t>(i) * n + j] = vc[static_cast<std::size_t>(i)];
    set_backfn(out, [col, r, n](Graph& g, int id) {
      const auto& go = g.grad(id);
      auto& gc = g.grad_for(col);
      for (int i = 0; i < r; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += go[static_cast<std::size_t>(i) * n + j];
        gc[static_cast<std::size_t>(i)] += s;
      }
    });
    return out;
  }

  // --- linear algebra --------------------------------------------------

  Value matmul(Value a, Value b) {
    detail::require(node(a).shape.rank() == 2 && node(b).shape.rank() == 2,
                    "ad::matmul: need 2D inputs");
    const int m = node(a).shape.extent(0), k = node(a).shape.extent(1);
    const int n = node(b).shape.extent(1);
    detail::require(node(b).shape.extent(0) == k, "ad::matmul: inner mismatch");
    Value out = alloc(Shape{m, n}, {a, b});
    const auto& va = node(a).value;
    const auto& vb = node(b).value;
    auto& v = node_mut(out).value;
    for (int i = 0; i < m; ++i) {
      double* crow = v.data() + static_cast<std::size_t>(i) * n;
      for (int l = 0; l < k; ++l) {
        const double av = va[static_cast<std::size_t>(i) * k + l];
        if (av == 0.0) continue;
        const double* brow = vb.data() + static_cast<std::size_t>(l) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    set_backfn(out, [a, b, m, k, n](Graph& g, int id) {
      const auto& go = g.grad(id);
      const auto& va = g.node(a).value;
      const auto& vb = g.node(b).value;
      if (g.node(a).requires_grad) {
        auto& ga = g.grad_for(a);
        // dA = dC * B^T
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            const double* grow = go.data() + static_cast<std::size_t>(i) * n;
            const double* brow = vb.data() + static_cast<std::size_t>(l) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga[static_cast<std::size_t>(i) * k + l] += s;
          }
      }
      if (g.node(b).requires_grad) {
        auto& gb = g.grad_for(b);
        // dB = A^T * dC
        for (int i = 0; i < m; ++i) {
          const double* grow = go.data() + static_cast<std::size_t>(i) * n;
          for (int l = 0; l < k; ++l) {
            const double av = va[static_cast<std::size_t>(i) * k + l];
            if (av == 0.0) continue;
            double* gbrow = gb.data() + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
    return out;
  }

  // x: Cin x H x W, w: Cout x Cin, b: Cout -> Cout x H x W
  Value channel_mix(Value x, Value w, Value b) {
    detail::require(node(x).shape.rank() == 3, "ad::channel_mix: x must be 3D");
    const int cin = node(x).shape.extent(0);
    const int h = node(x).shape.extent(1), wd = node(x).shape.extent(2);
    const int n = h * wd;
    const int cout = node(w).shape.extent(0);
    detail::require(node(w).shape.rank() == 2 && node(w).shape.extent(1) == cin,
                    "ad::channel_mix: weight extents mismatch");
    detail::require(node(b).shape.rank() == 1 && node(b).shape.extent(0) == cout,
                    "ad::channel_mix: bias extent mismatch");
    Value out = alloc(Shape{cout, h, wd}, {x, w, b});
    const auto& vx = node(x).value;
    const auto& vw = node(w).value;
    const auto& vb = node(b).value;
    auto& v = node_mut(out).value;
    for (int o = 0; o < cout; ++o) {
      double* orow = v.data() + static_cast<std::size_t>(o) * n;
      const double bias = vb[static_cast<std::size_t>(o)];
      for (int p = 0; p < n; ++p) orow[p] = bias;
      for (int c = 0; c < cin; ++c) {
        const double wv = vw[static_cast<std::size_t>(o) * cin + c];
        if (wv == 0.0) continue;
        const double* xrow = vx.data() + static_cast<std::size_t>(c) * n;
        for (int p = 0; p < n; ++p) orow[p] += wv * xrow[p];
      }
    }
    set_backfn(out, [x, w, b, cin, cout, n](Graph& g, int id) {
      const auto& go = g.grad(id);
      const auto& vx = g.node(x).value;
      const auto& vw = g.node(w).value;
      if (g.node(x).requires_grad) {
        auto& gx = g.grad_for(x);
        for (int o = 0; o < cout; ++o) {
          const double* grow = go.data() + static_cast<std::size_t>(o) * n;
          for (int c = 0; c < cin; ++c) {
            const double wv = vw[static_cast<std::size_t>(o) * cin + c];
            if (wv == 0.0) continue;
            double* gxrow = gx.data() + static_cast<std::size_t>(c) * n;
            for (int p = 0; p < n; ++p) gxrow[p] += wv * grow[p];
          }
        }
      }
      if (g.node(w).requires_grad) {
        auto& gw = g.grad_for(w);
        for (int o = 0; o < cout; ++o) {
          const double* grow = go.data() + static_cast<std::size_t>(o) * n;
          for (int c = 0; c < cin; ++c) {
            const double* xrow = vx.data() + static_cast<std::size_t>(c) * n;
            double s = 0.0;
            for (int p = 0; p < n; ++p) s += grow[p] * xrow[p];
            gw[static_cast<std::size_t>(o) * cin + c] += s;
          }
        }
      }
      if (g.node(b).requires_grad) {
        auto& gb = g.grad_for(b);
        for (int o = 0; o < cout; ++o) {
          const double* grow = go.data() + static_cast<std::size_t>(o) * n;
          double s = 0.0;
          for (int p = 0; p < n; ++p) s += grow[p];
          gb[static_cast<std::size_t>(o)] += s;
        }
      }
    });
    return out;
  }

  // global average pooling: C x H x W -> C
  Value gap(Value x) {
    detail::require(node(x).shape.rank() == 3, "ad::gap: need 3D");
    const int c = node(x).shape.extent(0);
    const int n = node(x).shape.extent(1) * node(x).shape.extent(2);
    Value out = alloc(Shape{c}, {x});
    const auto& vx = node(x).value;
    auto& v = node_mut(out).value;
    for (int ch = 0; ch < c; ++ch) {
      const double* row = vx.data() + static_cast<std::size_t>(ch) * n;
      double s = 0.0;
      for (int p = 0; p < n; ++p) s += row[p];
      v[static_cast<std::size_t>(ch)] = s / n;
    }
    set_backfn(out, [x, c, n](Graph& g, int id) {
      const auto& go = g.grad(id);
      auto& gx = g.grad_for(x);
      for (int ch = 0; ch < c; ++ch) {
        const double gv = go[static_cast<std::size_t>(ch)] / n;
        double* row = gx.data() + static_cast<std::size_t>(ch) * n;
        for (int p = 0; p < n; ++p) row[p] += gv;
      }
    });
    return out;
  }

  // count-normalized 3x3 neighbourhood average sampled at the given stride
  Value avg_pool3x3(Value x, int stride) {
    detail::require(node(x).shape.rank() == 3, "ad::avg_pool3x3: need 3D");
    detail::require(stride >= 1, "ad::avg_pool3x3: stride must be >= 1");
    const int c = node(x).shape.extent(0);
    const int h = node(x).shape.extent(1), w = node(x).shape.extent(2);
    const int oh = (h + stride - 1) / stride;
    const int ow = (w + stride - 1) / stride;
    Value out = alloc(Shape{c, oh, ow}, {x});
    const auto& vx = node(x).value;
    auto& v = node_mut(out).value;
    for (int ch = 0; ch < c; ++ch) {
      const double* src = vx.data() + static_cast<std::size_t>(ch) * h * w;
      double* dst = v.data() + static_cast<std::size_t>(ch) * oh * ow;
      for (int oi = 0; oi < oh; ++oi)
        for (int oj = 0; oj < ow; ++oj) {
          const int ci = oi * stride, cj = oj * stride;
          double s = 0.0;
          int count = 0;
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int y = ci + di, xx = cj + dj;
              if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
              s += src[static_cast<std::size_t>(y) * w + xx];
              ++count;
            }
          dst[static_cast<std::size_t>(oi) * ow + oj] = s / count;
        }
    }
    set_backfn(out, [x, c, h, w, oh, ow, stride](Graph& g, int id) {
      const auto& go = g.grad(id);
      auto& gx = g.grad_for(x);
      for (int ch = 0; ch < c; ++ch) {
        double* dst = gx.data() + static_cast<std::size_t>(ch) * h * w;
        const double* src = go.data() + static_cast<std::size_t>(ch) * oh * ow;
        for (int oi = 0; oi < oh; ++oi)
          for (int oj = 0; oj < ow; ++oj) {
            const int ci = oi * stride, cj = oj * stride;
            int count = 0;
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                const int y = ci + di, xx = cj + dj;
                if (y >= 0 && y < h && xx >= 0 && xx < w) ++count;
              }
            const double gv = src[static_cast<std::size_t>(oi) * ow + oj] / count;
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                const int y = ci + di, xx = cj + dj;
                if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
                dst[static_cast<std::size_t>(y) * w + xx] += gv;
              }
          }
      }
    });
    return out;
  }

  // --- normalizations ----------------------------------------------------

  // softmax along rows (axis 1) or columns (axis 0) of a 2D node
  Value softmax2d(Value a, int axis) {
    detail::require(node(a).shape.rank() == 2, "ad::softmax2d: need 2D");
    detail::require(axis == 0 || axis == 1, "ad::softmax2d: bad axis");
    const int rows = node(a).shape.extent(0), cols = node(a).shape.extent(1);
    const int outer = axis == 1 ? rows : cols;
    const int inner = axis == 1 ? cols : rows;
    const std::size_t ostride = axis == 1 ? static_cast<std::size_t>(cols) : 1;
    const std::size_t istride = axis == 1 ? 1 : static_cast<std::size_t>(cols);
    Value out = alloc(node(a).shape, {a});
    const auto& va = node(a).value;
    auto& v = node_mut(out).value;
    for (int o = 0; o < outer; ++o) {
      const std::size_t base = o * ostride;
      double mx = va[base];
      for (int i = 1; i < inner; ++i)
        mx = std::max(mx, va[base + i * istride]);
      double z = 0.0;
      for (int i = 0; i < inner; ++i) {
        const double e = std::exp(va[base + i * istride] - mx);
        v[base + i * istride] = e;
        z += e;
      }
      for (int i = 0; i < inner; ++i) v[base + i * istride] /= z;
    }
    set_backfn(out, [a, outer, inner, ostride, istride](Graph& g, int id) {
      const auto& go = g.grad(id);
      const auto& y = g.node(id).value;
      auto& ga = g.grad_for(a);
      for (int o = 0; o < outer; ++o) {
        const std::size_t base = o * ostride;
        double dot = 0.0;
        for (int i = 0; i < inner; ++i)
          dot += go[base + i * istride] * y[base + i * istride];
        for (int i = 0; i < inner; ++i)
          ga[base + i * istride] +=
              (go[base + i * istride] - dot) * y[base + i * istride];
      }
    });
    return out;
  }

  Value normalize_axis(Value a, int axis) {
    detail::require(node(a).shape.rank() == 2, "ad::normalize_axis: need 2D");
    detail::require(axis == 0 || axis == 1, "ad::normalize_axis: bad axis");
    const int rows = node(a).shape.extent(0), cols = node(a).shape.extent(1);
    const int outer = axis == 1 ? rows : cols;
    const int inner = axis == 1 ? cols : rows;
    const std::size_t ostride = axis == 1 ? static_cast<std::size_t>(cols) : 1;
    const std::size_t istride = axis == 1 ? 1 : static_cast<std::size_t>(cols);
    Value out = alloc(node(a).shape, {a});
    const auto& va = node(a).value;
    auto& v = node_mut(out).value;
    for (int o = 0; o < outer; ++o) {
      const std::size_t base = o * ostride;
      double s = 0.0;
      for (int i = 0; i < inner; ++i) s += va[base + i * istride];
      for (int i = 0; i < inner; ++i)
        v[base + i * istride] = va[base + i * istride] / s;
    }
    set_backfn(out, [a, outer, inner, ostride, istride](Graph& g, int id) {
      const auto& go = g.grad(id);
      const auto& y = g.node(id).value;
      const auto& x = g.node(a).value;
      auto& ga = g.grad_for(a);
      for (int o = 0; o < outer; ++o) {
        const std::size_t base = o * ostride;
        double s = 0.0, dot = 0.0;
        for (int i = 0; i < inner; ++i) {
          s += x[base + i * istride];
          dot += go[base + i * istride] * y[base + i * istride];
        }
        for (int i = 0; i < inner; ++i)
          ga[base + i * istride] += (go[base + i * istride] - dot) / s;
      }
    });
    return out;
  }

  Value normalize_rows(Value a) { return normalize_axis(a, 1); }
  Value normalize_cols(Value a) { return normalize_axis(a, 0); }

  // --- scalar losses -----------------------------------------------------

  Value mlsm_loss(Value logits, std::vector<int> targets) {
    const int c = static_cast<int>(node(logits).value.size());
    detail::require(static_cast<int>(targets.size()) == c,
                    "ad::mlsm_loss: target extent mismatch");
    Value out = alloc(Shape{1}, {logits});
    const auto& vl = node(logits).value;
    double total = 0.0;
    for (int i = 0; i < c; ++i) {
      const double x = vl[static_cast<std::size_t>(i)];
      const double y = targets[static_cast<std::size_t>(i)];
      const double sp_neg = std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)));
      const double sp_pos = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
      total += y * sp_neg + (1.0 - y) * sp_pos;
    }
    node_mut(out).value[0] = total / c;
    set_backfn(out, [logits, targets = std::move(targets), c](Graph& g, int id) {
      const double go = g.grad(id)[0];
      const auto& x = g.node(logits).value;
      auto& gl = g.grad_for(logits);
      for (int i = 0; i < c; ++i) {
        const double xi = x[static_cast<std::size_t>(i)];
        const double sig = xi >= 0.0 ? 1.0 / (1.0 + std::exp(-xi))
                                     : std::exp(xi) / (1.0 + std::exp(xi));
        gl[static_cast<std::size_t>(i)] +=
            go * (sig - targets[static_cast<std::size_t>(i)]) / c;
      }
    });
    return out;
  }

  Value bce_loss(Value pred, std::vector<std::uint8_t> target) {
    const std::size_t n = node(pred).value.size();
    detail::require(target.size() == n, "ad::bce_loss: target extent mismatch");
    constexpr double eps = 1e-7;
    Value out = alloc(Shape{1}, {pred});
    const auto& vp = node(pred).value;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double p = std::min(1.0 - eps, std::max(eps, vp[i]));
      const double t = target[i];
      total += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    }
    node_mut(out).value[0] = total / static_cast<double>(n);
    set_backfn(out, [pred, target = std::move(target), n](Graph& g, int id) {
      const double go = g.grad(id)[0];
      const auto& p = g.node(pred).value;
      auto& gp = g.grad_for(pred);
      for (std::size_t i = 0; i < n; ++i) {
        if (p[i] <= 1e-7 || p[i] >= 1.0 - 1e-7) continue;  // clamp region
        const double t = target[i];
        gp[i] += go * (p[i] - t) / (p[i] * (1.0 - p[i]) * static_cast<double>(n));
      }
    });
    return out;
  }

  // probs: C x N columns summing to 1; labels length N with kIgnore skipped
  Value ce_loss(Value probs, std::vector<std::uint8_t> labels) {
    detail::require(node(probs).shape.rank() == 2,
                    "ad::ce_loss: probs must be C x N");
    const int c = node(probs).shape.extent(0);
    const std::size_t n = static_cast<std::size_t>(node(probs).shape.extent(1));
    detail::require(labels.size() == n, "ad::ce_loss: label extent mismatch");
    constexpr double eps = 1e-7;
    std::size_t m = 0;
    for (std::size_t p = 0; p < n; ++p)
      if (labels[p] != LabelMap::kIgnore) {
        detail::require(labels[p] < c, "ad::ce_loss: label out of range");
        ++m;
      }
    Value out = alloc(Shape{1}, {probs});
    if (m == 0) {
      node_mut(out).backfn = nullptr;  // zero loss, no gradient path
      node_mut(out).requires_grad = false;
      return out;
    }
    const auto& vp = node(probs).value;
    double total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      if (labels[p] == LabelMap::kIgnore) continue;
      const double q = std::max(eps, vp[labels[p] * n + p]);
      total += -std::log(q);
    }
    node_mut(out).value[0] = total / static_cast<double>(m);
    set_backfn(out, [probs, labels = std::move(labels), n, m](Graph& g, int id) {
      const double go = g.grad(id)[0];
      const auto& p = g.node(probs).value;
      auto& gp = g.grad_for(probs);
      for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] == LabelMap::kIgnore) continue;
        const double q = p[labels[i] * n + i];
        if (q <= 1e-7) continue;
        gp[labels[i] * n + i] += go * (-1.0 / (q * static_cast<double>(m)));
      }
    });
    return out;
  }

  Value weighted_sum(const std::vector<std::pair<Value, double>>& terms) {
    detail::require(!terms.empty(), "ad::weighted_sum: no terms");
    std::vector<Value> parents;
    for (const auto& [v, w] : terms) {
      detail::require(node(v).value.size() == 1,
                      "ad::weighted_sum: terms must be scalars");
      parents.push_back(v);
    }
    Value out = alloc(Shape{1}, parents);
    double total = 0.0;
    for (const auto& [v, w] : terms) total += w * node(v).value[0];
    node_mut(out).value[0] = total;
    set_backfn(out, [terms](Graph& g, int id) {
      const double go = g.grad(id)[0];
      for (const auto& [v, w] : terms)
        if (g.node(v).requires_grad) g.grad_for(v)[0] += go * w;
    });
    return out;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void(Graph&, int)> backfn;
  };

  const Node& node(Value v) const {
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Node& node_mut(Value v) { return nodes_[static_cast<std::size_t>(v.id)]; }

  Value alloc(Shape shape, const std::vector<Value>& parents) {
    Node n;
    n.shape = std::move(shape);
    n.value.assign(n.shape.elements(), 0.0);
    for (Value p : parents) n.requires_grad |= node(p).requires_grad;
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  void set_backfn(Value v, std::function<void(Graph&, int)> fn) {
    if (node(v).requires_grad) node_mut(v).backfn = std::move(fn);
  }

  std::vector<double>& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }
  const std::vector<double>& grad(Value v) { return grad(v.id); }

  // parent gradient buffer; constants get a (discarded) buffer too, which
  // keeps the backward kernels branch-free
  std::vector<double>& grad_for(Value v) { return grad(v.id); }

  void accumulate(Value v, const std::vector<double>& g) {
    auto& gv = grad(v.id);
    for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
  }

  std::vector<Node> nodes_;
};

}  // namespace affseg::ad
