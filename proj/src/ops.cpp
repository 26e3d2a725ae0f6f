#include "diffsal/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace diffsal {

namespace {

enum class Op { kN, kT };

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using View = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

// C = alpha op(A) op(B) + beta C on row-major buffers, BLAS argument order.
void gemm(Op ta, Op tb, int64_t m, int64_t n, int64_t k, double alpha, const double* a, int64_t lda,
          const double* b, int64_t ldb, double beta, double* c, int64_t ldc) {
  const ConstView A(a, ta == Op::kN ? m : k, ta == Op::kN ? k : m, Eigen::OuterStride<>(lda));
  const ConstView B(b, tb == Op::kN ? k : n, tb == Op::kN ? n : k, Eigen::OuterStride<>(ldb));
  View C(c, m, n, Eigen::OuterStride<>(ldc));
  if (beta == 0.0) {
    C.setZero();
  } else if (beta != 1.0) {
    C *= beta;
  }
  if (ta == Op::kN && tb == Op::kN) {
    C.noalias() += alpha * A * B;
  } else if (ta == Op::kN) {
    C.noalias() += alpha * A * B.transpose();
  } else if (tb == Op::kN) {
    C.noalias() += alpha * A.transpose() * B;
  } else {
    C.noalias() += alpha * A.transpose() * B.transpose();
  }
}

int64_t norm_axis(int64_t axis, int64_t rank, const Shape& shape) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError("axis out of range for shape " + shape_str(shape));
  }
  return axis;
}

struct AxisSplit {
  int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int64_t axis) {
  AxisSplit r;
  for (int64_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// For every element of `out`, the flat index of the broadcast source in `in`.
std::vector<int64_t> broadcast_map(const Shape& out, const Shape& in) {
  const size_t R = out.size();
  const size_t off = R - in.size();
  std::vector<int64_t> in_stride(R, 0);
  int64_t s = 1;
  for (size_t i = in.size(); i-- > 0;) {
    in_stride[off + i] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const int64_t total = numel(out);
  std::vector<int64_t> map(total);
  std::vector<int64_t> idx(R, 0);
  int64_t cur = 0;
  for (int64_t o = 0; o < total; ++o) {
    map[o] = cur;
    for (size_t d = R; d-- > 0;) {
      if (++idx[d] < out[d]) {
        cur += in_stride[d];
        break;
      }
      cur -= in_stride[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const int64_t n = numel(out_shape);
  const auto& av = a.impl()->data;
  const auto& bv = b.impl()->data;
  std::vector<double> out(n);
  const bool same_a = a.shape() == out_shape;
  const bool same_b = b.shape() == out_shape;
  std::vector<int64_t> ia, ib;
  if (same_a && same_b) {
    for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    ia = same_a ? std::vector<int64_t>{} : broadcast_map(out_shape, a.shape());
    ib = same_b ? std::vector<int64_t>{} : broadcast_map(out_shape, b.shape());
    for (int64_t i = 0; i < n; ++i) {
      out[i] = f(av[same_a ? i : ia[i]], bv[same_b ? i : ib[i]]);
    }
  }
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return make_result(out_shape, std::move(out), name, {a, b},
                     [pa, pb, same_a, same_b, ia = std::move(ia), ib = std::move(ib), da, db](const TensorImpl& o) {
                       const auto& g = o.grad;
                       const auto& av = pa->data;
                       const auto& bv = pb->data;
                       const int64_t n = static_cast<int64_t>(g.size());
                       if (pa->requires_grad) {
                         auto& ga = pa->ensure_grad();
                         for (int64_t i = 0; i < n; ++i) {
                           const int64_t x = same_a ? i : ia[i];
                           const int64_t y = same_b ? i : ib[i];
                           ga[x] += g[i] * da(av[x], bv[y]);
                         }
                       }
                       if (pb->requires_grad) {
                         auto& gb = pb->ensure_grad();
                         for (int64_t i = 0; i < n; ++i) {
                           const int64_t x = same_a ? i : ia[i];
                           const int64_t y = same_b ? i : ib[i];
                           gb[y] += g[i] * db(av[x], bv[y]);
                         }
                       }
                     });
}

// Derivative given input x and output y.
template <class F, class D>
Tensor unary_op(const Tensor& x, const char* name, F f, D d) {
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  TensorImpl* px = x.impl().get();
  return make_result(x.shape(), std::move(out), name, {x}, [px, d](const TensorImpl& o) {
    auto& gx = px->ensure_grad();
    const auto& xv = px->data;
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * d(xv[i], o.data[i]);
  });
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const size_t R = std::max(a.size(), b.size());
  Shape out(R);
  for (size_t i = 0; i < R; ++i) {
    const int64_t da = i < R - a.size() ? 1 : a[i - (R - a.size())];
    const int64_t db = i < R - b.size() ? 1 : b[i - (R - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double s) {
  return unary_op(
      x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(
      x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary_op(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw ShapeError("matmul needs rank >= 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int64_t m = a.size(-2), k = a.size(-1), k2 = b.size(-2), n = b.size(-1);
  if (k != k2) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape a_lead(a.shape().begin(), a.shape().end() - 2);
  const Shape b_lead(b.shape().begin(), b.shape().end() - 2);
  Shape lead;
  try {
    lead = broadcast_shapes(a_lead, b_lead);
  } catch (const ShapeError&) {
    throw ShapeError("matmul batch dimensions do not broadcast: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const int64_t batches = numel(lead);
  std::vector<int64_t> amap = broadcast_map(lead, a_lead);
  std::vector<int64_t> bmap = broadcast_map(lead, b_lead);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batches * m * n);
  const double* ad = a.impl()->data.data();
  const double* bd = b.impl()->data.data();
  for (int64_t i = 0; i < batches; ++i) {
    gemm(Op::kN, Op::kN, m, n, k, 1.0, ad + amap[i] * m * k, k,
                bd + bmap[i] * k * n, n, 0.0, out.data() + i * m * n, n);
  }
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return make_result(std::move(out_shape), std::move(out), "matmul", {a, b},
                     [pa, pb, m, n, k, batches, amap = std::move(amap), bmap = std::move(bmap)](const TensorImpl& o) {
                       const double* g = o.grad.data();
                       if (pa->requires_grad) {
                         double* ga = pa->ensure_grad().data();
                         const double* bd = pb->data.data();
                         for (int64_t i = 0; i < batches; ++i) {
                           gemm(Op::kN, Op::kT, m, k, n, 1.0, g + i * m * n, n,
                                       bd + bmap[i] * k * n, n, 1.0, ga + amap[i] * m * k, k);
                         }
                       }
                       if (pb->requires_grad) {
                         double* gb = pb->ensure_grad().data();
                         const double* ad = pa->data.data();
                         for (int64_t i = 0; i < batches; ++i) {
                           gemm(Op::kT, Op::kN, k, n, m, 1.0, ad + amap[i] * m * k, k,
                                       g + i * m * n, n, 1.0, gb + bmap[i] * k * n, n);
                         }
                       }
                     });
}

namespace {

struct ConvGeom {
  int64_t cin, t, h, w;
  int64_t cout, kt, kh, kw;
  int64_t st, sh, sw, pt, ph, pw;
  int64_t ot, oh, ow;
  int64_t rows() const { return cin * kt * kh * kw; }
  int64_t cols() const { return ot * oh * ow; }
  bool pointwise() const {
    return kt == 1 && kh == 1 && kw == 1 && st == 1 && sh == 1 && sw == 1 && pt == 0 && ph == 0 && pw == 0;
  }
};

// Column buffers cover output time steps [t0, t1) so peak memory stays bounded.
void im2col(const ConvGeom& g, const double* in, double* cols, int64_t t0, int64_t t1) {
  const int64_t P = (t1 - t0) * g.oh * g.ow;
  int64_t row = 0;
  for (int64_t c = 0; c < g.cin; ++c)
    for (int64_t dt = 0; dt < g.kt; ++dt)
      for (int64_t dh = 0; dh < g.kh; ++dh)
        for (int64_t dw = 0; dw < g.kw; ++dw, ++row) {
          double* dst = cols + row * P;
          for (int64_t ot = t0; ot < t1; ++ot) {
            const int64_t it = ot * g.st - g.pt + dt;
            for (int64_t oh = 0; oh < g.oh; ++oh) {
              const int64_t ih = oh * g.sh - g.ph + dh;
              double* d = dst + ((ot - t0) * g.oh + oh) * g.ow;
              if (it < 0 || it >= g.t || ih < 0 || ih >= g.h) {
                std::fill(d, d + g.ow, 0.0);
                continue;
              }
              const double* src = in + ((c * g.t + it) * g.h + ih) * g.w;
              for (int64_t ow = 0; ow < g.ow; ++ow) {
                const int64_t iw = ow * g.sw - g.pw + dw;
                d[ow] = (iw >= 0 && iw < g.w) ? src[iw] : 0.0;
              }
            }
          }
        }
}

void col2im(const ConvGeom& g, const double* cols, double* in, int64_t t0, int64_t t1) {
  const int64_t P = (t1 - t0) * g.oh * g.ow;
  int64_t row = 0;
  for (int64_t c = 0; c < g.cin; ++c)
    for (int64_t dt = 0; dt < g.kt; ++dt)
      for (int64_t dh = 0; dh < g.kh; ++dh)
        for (int64_t dw = 0; dw < g.kw; ++dw, ++row) {
          const double* srcrow = cols + row * P;
          for (int64_t ot = t0; ot < t1; ++ot) {
            const int64_t it = ot * g.st - g.pt + dt;
            if (it < 0 || it >= g.t) continue;
            for (int64_t oh = 0; oh < g.oh; ++oh) {
              const int64_t ih = oh * g.sh - g.ph + dh;
              if (ih < 0 || ih >= g.h) continue;
              const double* s = srcrow + ((ot - t0) * g.oh + oh) * g.ow;
              double* dst = in + ((c * g.t + it) * g.h + ih) * g.w;
              for (int64_t ow = 0; ow < g.ow; ++ow) {
                const int64_t iw = ow * g.sw - g.pw + dw;
                if (iw >= 0 && iw < g.w) dst[iw] += s[ow];
              }
            }
          }
        }
}

constexpr int64_t kColBudget = int64_t{1} << 22;  // doubles per column buffer

int64_t chunk_steps(const ConvGeom& g) {
  const int64_t per_step = std::max<int64_t>(1, g.rows() * g.oh * g.ow);
  return std::clamp<int64_t>(kColBudget / per_step, 1, g.ot);
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& kernel, const Conv3dOptions& opt) {
  if (input.dim() != 4 || kernel.dim() != 5) {
    throw ShapeError("conv3d expects input [C,T,H,W] and kernel [O,C,kt,kh,kw], got " + shape_str(input.shape()) +
                     " and " + shape_str(kernel.shape()));
  }
  ConvGeom g{};
  g.cin = input.size(0);
  g.t = input.size(1);
  g.h = input.size(2);
  g.w = input.size(3);
  g.cout = kernel.size(0);
  g.kt = kernel.size(2);
  g.kh = kernel.size(3);
  g.kw = kernel.size(4);
  if (kernel.size(1) != g.cin) {
    throw ShapeError("conv3d channel mismatch: input " + shape_str(input.shape()) + ", kernel " +
                     shape_str(kernel.shape()));
  }
  g.st = opt.stride[0];
  g.sh = opt.stride[1];
  g.sw = opt.stride[2];
  g.pt = opt.padding[0];
  g.ph = opt.padding[1];
  g.pw = opt.padding[2];
  if (g.st < 1 || g.sh < 1 || g.sw < 1) throw ShapeError("conv3d stride must be positive");
  if (g.kt > g.t + 2 * g.pt || g.kh > g.h + 2 * g.ph || g.kw > g.w + 2 * g.pw) {
    throw ShapeError("conv kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  g.ot = (g.t + 2 * g.pt - g.kt) / g.st + 1;
  g.oh = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
  g.ow = (g.w + 2 * g.pw - g.kw) / g.sw + 1;
  const int64_t R = g.rows(), P = g.cols();
  std::vector<double> out(g.cout * P);
  if (g.pointwise()) {
    gemm(Op::kN, Op::kN, g.cout, P, R, 1.0, kernel.impl()->data.data(), R, input.impl()->data.data(), P, 0.0,
         out.data(), P);
  } else {
    const int64_t step = chunk_steps(g), plane = g.oh * g.ow;
    std::vector<double> cols(R * step * plane);
    for (int64_t t0 = 0; t0 < g.ot; t0 += step) {
      const int64_t t1 = std::min(g.ot, t0 + step), pc = (t1 - t0) * plane;
      im2col(g, input.impl()->data.data(), cols.data(), t0, t1);
      gemm(Op::kN, Op::kN, g.cout, pc, R, 1.0, kernel.impl()->data.data(), R, cols.data(), pc, 0.0,
           out.data() + t0 * plane, P);
    }
  }
  TensorImpl* pi = input.impl().get();
  TensorImpl* pk = kernel.impl().get();
  return make_result({g.cout, g.ot, g.oh, g.ow}, std::move(out), "conv3d", {input, kernel},
                     [pi, pk, g](const TensorImpl& o) {
                       const int64_t R = g.rows(), P = g.cols();
                       const double* gout = o.grad.data();
                       if (g.pointwise()) {
                         if (pk->requires_grad) {
                           gemm(Op::kN, Op::kT, g.cout, R, P, 1.0, gout, P, pi->data.data(), P, 1.0,
                                pk->ensure_grad().data(), R);
                         }
                         if (pi->requires_grad) {
                           gemm(Op::kT, Op::kN, R, P, g.cout, 1.0, pk->data.data(), R, gout, P, 1.0,
                                pi->ensure_grad().data(), P);
                         }
                         return;
                       }
                       const int64_t step = chunk_steps(g), plane = g.oh * g.ow;
                       std::vector<double> cols(R * step * plane);
                       for (int64_t t0 = 0; t0 < g.ot; t0 += step) {
                         const int64_t t1 = std::min(g.ot, t0 + step), pc = (t1 - t0) * plane;
                         const double* gchunk = gout + t0 * plane;
                         if (pk->requires_grad) {
                           im2col(g, pi->data.data(), cols.data(), t0, t1);
                           gemm(Op::kN, Op::kT, g.cout, R, pc, 1.0, gchunk, P, cols.data(), pc, 1.0,
                                pk->ensure_grad().data(), R);
                         }
                         if (pi->requires_grad) {
                           gemm(Op::kT, Op::kN, R, pc, g.cout, 1.0, pk->data.data(), R, gchunk, P, 0.0,
                                cols.data(), pc);
                           col2im(g, cols.data(), pi->ensure_grad().data(), t0, t1);
                         }
                       }
                     });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int64_t stride, int64_t padding) {
  if (input.dim() != 3 || kernel.dim() != 4) {
    throw ShapeError("conv2d expects input [C,H,W] and kernel [O,C,kh,kw], got " + shape_str(input.shape()) +
                     " and " + shape_str(kernel.shape()));
  }
  if (kernel.size(2) > input.size(1) + 2 * padding || kernel.size(3) > input.size(2) + 2 * padding) {
    throw ShapeError("conv kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  const Tensor in4 = reshape(input, {input.size(0), 1, input.size(1), input.size(2)});
  const Tensor k5 = reshape(kernel, {kernel.size(0), kernel.size(1), 1, kernel.size(2), kernel.size(3)});
  Conv3dOptions opt;
  opt.stride = {1, stride, stride};
  opt.padding = {0, padding, padding};
  const Tensor y = conv3d(in4, k5, opt);
  return reshape(y, {y.size(0), y.size(2), y.size(3)});
}

Tensor softmax(const Tensor& x, int64_t axis) {
  axis = norm_axis(axis, x.dim(), x.shape());
  const AxisSplit s = split_at(x.shape(), axis);
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t i = 0; i < s.inner; ++i) {
      const int64_t base = o * s.n * s.inner + i;
      double mx = -INFINITY;
      for (int64_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double z = 0.0;
      for (int64_t j = 0; j < s.n; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      for (int64_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= z;
    }
  TensorImpl* px = x.impl().get();
  return make_result(x.shape(), std::move(out), "softmax", {x}, [px, s](const TensorImpl& o) {
    auto& gx = px->ensure_grad();
    const auto& y = o.data;
    const auto& g = o.grad;
    for (int64_t a = 0; a < s.outer; ++a)
      for (int64_t i = 0; i < s.inner; ++i) {
        const int64_t base = a * s.n * s.inner + i;
        double dot = 0.0;
        for (int64_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (int64_t j = 0; j < s.n; ++j) {
          const int64_t idx = base + j * s.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, int64_t normalized_axes, const Tensor& gain, const Tensor& bias, double eps) {
  if (normalized_axes < 1 || normalized_axes > x.dim()) {
    throw ShapeError("layer_norm over " + std::to_string(normalized_axes) + " axes of " + shape_str(x.shape()));
  }
  const Shape norm_shape(x.shape().end() - normalized_axes, x.shape().end());
  const bool affine = gain.defined();
  if (affine != bias.defined()) throw ShapeError("layer_norm needs both gain and bias, or neither");
  if (affine && (gain.shape() != norm_shape || bias.shape() != norm_shape)) {
    throw ShapeError("layer_norm gain/bias " + shape_str(gain.shape()) + " do not match normalized shape " +
                     shape_str(norm_shape));
  }
  const int64_t inner = numel(norm_shape);
  const int64_t outer = inner == 0 ? 0 : x.numel() / inner;
  const auto& xv = x.impl()->data;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(outer);
  std::vector<double> out(xv.size());
  for (int64_t o = 0; o < outer; ++o) {
    const double* src = xv.data() + o * inner;
    double mu = 0.0;
    for (int64_t i = 0; i < inner; ++i) mu += src[i];
    mu /= static_cast<double>(inner);
    double var = 0.0;
    for (int64_t i = 0; i < inner; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(inner);
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[o] = r;
    for (int64_t i = 0; i < inner; ++i) {
      const double h = (src[i] - mu) * r;
      (*xhat)[o * inner + i] = h;
      out[o * inner + i] = affine ? h * gain.impl()->data[i] + bias.impl()->data[i] : h;
    }
  }
  std::vector<Tensor> inputs{x};
  if (affine) {
    inputs.push_back(gain);
    inputs.push_back(bias);
  }
  TensorImpl* px = x.impl().get();
  TensorImpl* pg = affine ? gain.impl().get() : nullptr;
  TensorImpl* pb = affine ? bias.impl().get() : nullptr;
  return make_result(x.shape(), std::move(out), "layer_norm", std::move(inputs),
                     [px, pg, pb, xhat, rstd, inner, outer](const TensorImpl& o) {
                       const auto& g = o.grad;
                       if (pg && pg->requires_grad) {
                         auto& gg = pg->ensure_grad();
                         for (int64_t a = 0; a < outer; ++a)
                           for (int64_t i = 0; i < inner; ++i) gg[i] += g[a * inner + i] * (*xhat)[a * inner + i];
                       }
                       if (pb && pb->requires_grad) {
                         auto& gb = pb->ensure_grad();
                         for (int64_t a = 0; a < outer; ++a)
                           for (int64_t i = 0; i < inner; ++i) gb[i] += g[a * inner + i];
                       }
                       if (!px->requires_grad) return;
                       auto& gx = px->ensure_grad();
                       std::vector<double> dh(inner);
                       for (int64_t a = 0; a < outer; ++a) {
                         double m1 = 0.0, m2 = 0.0;
                         for (int64_t i = 0; i < inner; ++i) {
                           dh[i] = g[a * inner + i] * (pg ? pg->data[i] : 1.0);
                           m1 += dh[i];
                           m2 += dh[i] * (*xhat)[a * inner + i];
                         }
                         m1 /= static_cast<double>(inner);
                         m2 /= static_cast<double>(inner);
                         const double r = (*rstd)[a];
                         for (int64_t i = 0; i < inner; ++i) {
                           gx[a * inner + i] += r * (dh[i] - m1 - (*xhat)[a * inner + i] * m2);
                         }
                       }
                     });
}

Tensor sum(const Tensor& x, int64_t axis, bool keepdim) {
  axis = norm_axis(axis, x.dim(), x.shape());
  const AxisSplit s = split_at(x.shape(), axis);
  if (s.n == 0) throw ShapeError("reduction over empty axis of shape " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + axis);
  }
  const auto& xv = x.impl()->data;
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t j = 0; j < s.n; ++j) {
      const double* src = xv.data() + (o * s.n + j) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  TensorImpl* px = x.impl().get();
  return make_result(std::move(out_shape), std::move(out), "sum", {x}, [px, s](const TensorImpl& o) {
    auto& gx = px->ensure_grad();
    for (int64_t a = 0; a < s.outer; ++a)
      for (int64_t j = 0; j < s.n; ++j) {
        double* dst = gx.data() + (a * s.n + j) * s.inner;
        const double* g = o.grad.data() + a * s.inner;
        for (int64_t i = 0; i < s.inner; ++i) dst[i] += g[i];
      }
  });
}

Tensor mean(const Tensor& x, int64_t axis, bool keepdim) {
  const int64_t n = x.size(axis);
  if (n == 0) throw ShapeError("reduction over empty axis of shape " + shape_str(x.shape()));
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor sum_all(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("reduction of empty tensor");
  const auto& xv = x.impl()->data;
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  TensorImpl* px = x.impl().get();
  return make_result({}, {s}, "sum_all", {x}, [px](const TensorImpl& o) {
    auto& gx = px->ensure_grad();
    for (double& v : gx) v += o.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("reduction of empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  Shape s = shape;
  int64_t infer = -1, known = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape allows a single -1");
      infer = static_cast<int64_t>(i);
    } else {
      known *= s[i];
    }
  }
  if (infer >= 0) s[infer] = known == 0 ? 0 : x.numel() / known;
  if (numel(s) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  TensorImpl* px = x.impl().get();
  return make_result(std::move(s), x.impl()->data, "reshape", {x}, [px](const TensorImpl& o) {
    auto& gx = px->ensure_grad();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<int64_t>& perm) {
  const int64_t R = x.dim();
  if (static_cast<int64_t>(perm.size()) != R) throw ShapeError("permute rank mismatch for " + shape_str(x.shape()));
  std::vector<int64_t> p(R);
  std::vector<bool> used(R, false);
  for (int64_t i = 0; i < R; ++i) {
    p[i] = norm_axis(perm[i], R, x.shape());
    if (used[p[i]]) throw ShapeError("permute repeats an axis");
    used[p[i]] = true;
  }
  Shape out_shape(R);
  std::vector<int64_t> in_stride(R);
  {
    int64_t s = 1;
    for (int64_t i = R; i-- > 0;) {
      in_stride[i] = s;
      s *= x.shape()[i];
    }
  }
  std::vector<int64_t> src_stride(R);
  for (int64_t i = 0; i < R; ++i) {
    out_shape[i] = x.shape()[p[i]];
    src_stride[i] = in_stride[p[i]];
  }
  const int64_t total = x.numel();
  // out flat index -> input flat index
  auto index = std::make_shared<std::vector<int64_t>>(total);
  {
    std::vector<int64_t> idx(R, 0);
    int64_t cur = 0;
    for (int64_t o = 0; o < total; ++o) {
      (*index)[o] = cur;
      for (int64_t d = R; d-- > 0;) {
        if (++idx[d] < out_shape[d]) {
          cur += src_stride[d];
          break;
        }
        cur -= src_stride[d] * (out_shape[d] - 1);
        idx[d] = 0;
      }
    }
  }
  const auto& xv = x.impl()->data;
  std::vector<double> out(total);
  for (int64_t o = 0; o < total; ++o) out[o] = xv[(*index)[o]];
  TensorImpl* px = x.impl().get();
  return make_result(std::move(out_shape), std::move(out), "permute", {x}, [px, index](const TensorImpl& o) {
    auto& gx = px->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) gx[(*index)[i]] += o.grad[i];
  });
}

Tensor transpose(const Tensor& x, int64_t a, int64_t b) {
  std::vector<int64_t> perm(x.dim());
  std::iota(perm.begin(), perm.end(), 0);
  a = norm_axis(a, x.dim(), x.shape());
  b = norm_axis(b, x.dim(), x.shape());
  std::swap(perm[a], perm[b]);
  return permute(x, perm);
}

Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = xs[0].shape();
  axis = norm_axis(axis, static_cast<int64_t>(ref.size()), ref);
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    if (t.dim() != static_cast<int64_t>(ref.size())) throw ShapeError("concat rank mismatch");
    for (size_t d = 0; d < ref.size(); ++d) {
      if (static_cast<int64_t>(d) != axis && t.shape()[d] != ref[d]) {
        throw ShapeError("concat shape mismatch: " + shape_str(ref) + " vs " + shape_str(t.shape()));
      }
    }
    out_shape[axis] += t.shape()[axis];
  }
  const AxisSplit so = split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<int64_t> offsets;
  std::vector<int64_t> lens;
  int64_t off = 0;
  for (const auto& t : xs) {
    const int64_t len = t.shape()[axis];
    const auto& tv = t.impl()->data;
    for (int64_t o = 0; o < so.outer; ++o) {
      std::copy(tv.begin() + o * len * so.inner, tv.begin() + (o + 1) * len * so.inner,
                out.begin() + (o * so.n + off) * so.inner);
    }
    offsets.push_back(off);
    lens.push_back(len);
    off += len;
  }
  std::vector<TensorImpl*> ptrs;
  for (const auto& t : xs) ptrs.push_back(t.impl().get());
  return make_result(std::move(out_shape), std::move(out), "concat", xs,
                     [ptrs, offsets, lens, so](const TensorImpl& o) {
                       for (size_t k = 0; k < ptrs.size(); ++k) {
                         if (!ptrs[k]->requires_grad) continue;
                         auto& gk = ptrs[k]->ensure_grad();
                         const int64_t len = lens[k];
                         for (int64_t a = 0; a < so.outer; ++a) {
                           const double* src = o.grad.data() + (a * so.n + offsets[k]) * so.inner;
                           double* dst = gk.data() + a * len * so.inner;
                           for (int64_t i = 0; i < len * so.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor axis_map(const Tensor& x, int64_t axis, const AxisTaps& taps) {
  axis = norm_axis(axis, x.dim(), x.shape());
  const AxisSplit s = split_at(x.shape(), axis);
  for (const auto& row : taps)
    for (const auto& [k, w] : row) {
      if (k < 0 || k >= s.n) throw ShapeError("axis_map tap index out of range for " + shape_str(x.shape()));
    }
  const int64_t nout = static_cast<int64_t>(taps.size());
  Shape out_shape = x.shape();
  out_shape[axis] = nout;
  const auto& xv = x.impl()->data;
  std::vector<double> out(s.outer * nout * s.inner, 0.0);
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t j = 0; j < nout; ++j) {
      double* dst = out.data() + (o * nout + j) * s.inner;
      for (const auto& [k, w] : taps[j]) {
        const double* src = xv.data() + (o * s.n + k) * s.inner;
        for (int64_t i = 0; i < s.inner; ++i) dst[i] += w * src[i];
      }
    }
  TensorImpl* px = x.impl().get();
  return make_result(std::move(out_shape), std::move(out), "axis_map", {x}, [px, s, taps, nout](const TensorImpl& o) {
    auto& gx = px->ensure_grad();
    for (int64_t a = 0; a < s.outer; ++a)
      for (int64_t j = 0; j < nout; ++j) {
        const double* g = o.grad.data() + (a * nout + j) * s.inner;
        for (const auto& [k, w] : taps[j]) {
          double* dst = gx.data() + (a * s.n + k) * s.inner;
          for (int64_t i = 0; i < s.inner; ++i) dst[i] += w * g[i];
        }
      }
  });
}

Tensor narrow(const Tensor& x, int64_t axis, int64_t start, int64_t length) {
  const int64_t n = x.size(axis);
  if (start < 0 || length < 0 || start + length > n) {
    throw ShapeError("narrow [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                     shape_str(x.shape()));
  }
  AxisTaps taps(length);
  for (int64_t j = 0; j < length; ++j) taps[j] = {{start + j, 1.0}};
  return axis_map(x, axis, taps);
}

Tensor repeat_axis(const Tensor& x, int64_t axis, int64_t times) {
  if (x.size(axis) != 1) throw ShapeError("repeat_axis needs extent 1, got " + shape_str(x.shape()));
  return axis_map(x, axis, AxisTaps(times, {{0, 1.0}}));
}

Tensor pad_replicate(const Tensor& x, int64_t axis, int64_t new_length) {
  const int64_t n = x.size(axis);
  if (new_length < n) throw ShapeError("pad_replicate cannot shrink an axis");
  if (new_length == n) return x;
  AxisTaps taps(new_length);
  for (int64_t j = 0; j < new_length; ++j) taps[j] = {{std::min(j, n - 1), 1.0}};
  return axis_map(x, axis, taps);
}

Tensor resize_nearest(const Tensor& x, int64_t axis, int64_t out_length) {
  const int64_t n = x.size(axis);
  if (out_length == n) return x;
  AxisTaps taps(out_length);
  for (int64_t j = 0; j < out_length; ++j) taps[j] = {{std::min(n - 1, (j * n) / out_length), 1.0}};
  return axis_map(x, axis, taps);
}

Tensor resize_linear(const Tensor& x, int64_t axis, int64_t out_length) {
  const int64_t n = x.size(axis);
  if (out_length == n) return x;
  AxisTaps taps(out_length);
  const double ratio = static_cast<double>(n) / static_cast<double>(out_length);
  for (int64_t j = 0; j < out_length; ++j) {
    const double src = std::clamp((j + 0.5) * ratio - 0.5, 0.0, static_cast<double>(n - 1));
    const int64_t i0 = static_cast<int64_t>(std::floor(src));
    const int64_t i1 = std::min(i0 + 1, n - 1);
    const double w = src - static_cast<double>(i0);
    if (i1 == i0 || w == 0.0) {
      taps[j] = {{i0, 1.0}};
    } else {
      taps[j] = {{i0, 1.0 - w}, {i1, w}};
    }
  }
  return axis_map(x, axis, taps);
}

Tensor mean_pool_axis(const Tensor& x, int64_t axis, int64_t factor) {
  const int64_t n = x.size(axis);
  if (factor < 1 || n % factor != 0) {
    throw ShapeError("mean_pool_axis factor " + std::to_string(factor) + " does not divide " + shape_str(x.shape()));
  }
  AxisTaps taps(n / factor);
  for (int64_t j = 0; j < n / factor; ++j)
    for (int64_t k = 0; k < factor; ++k) taps[j].push_back({j * factor + k, 1.0 / static_cast<double>(factor)});
  return axis_map(x, axis, taps);
}

Tensor upsample_nearest(const Tensor& x, int64_t factor) {
  if (x.dim() < 2 || factor < 1) throw ShapeError("upsample_nearest needs rank >= 2 and factor >= 1");
  return resize_nearest(resize_nearest(x, -2, x.size(-2) * factor), -1, x.size(-1) * factor);
}

Tensor upsample_bilinear(const Tensor& x, int64_t factor) {
  if (x.dim() < 2 || factor < 1) throw ShapeError("upsample_bilinear needs rank >= 2 and factor >= 1");
  return resize_linear(resize_linear(x, -2, x.size(-2) * factor), -1, x.size(-1) * factor);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace diffsal
