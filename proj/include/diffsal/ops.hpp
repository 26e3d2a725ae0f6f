#pragma once

#include <array>
#include <utility>
#include <vector>

#include "diffsal/tensor.hpp"

namespace diffsal {

// Elementwise, broadcasting by trailing-dimension alignment.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Shape broadcast_shapes(const Shape& a, const Shape& b);

// a[..., m, k] x b[..., k, n]; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv3dOptions {
  std::array<int64_t, 3> stride{1, 1, 1};
  std::array<int64_t, 3> padding{0, 0, 0};
};

// Cross-correlation. input [C_in, T, H, W], kernel [C_out, C_in, kt, kh, kw].
Tensor conv3d(const Tensor& input, const Tensor& kernel, const Conv3dOptions& opt = {});
// input [C_in, H, W], kernel [C_out, C_in, kh, kw].
Tensor conv2d(const Tensor& input, const Tensor& kernel, int64_t stride = 1, int64_t padding = 0);

Tensor softmax(const Tensor& x, int64_t axis);

// Normalizes over the trailing `normalized_axes` dimensions. `gain` and
// `bias` may be undefined (no affine) or shaped like the normalized dims.
Tensor layer_norm(const Tensor& x, int64_t normalized_axes, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

Tensor sum(const Tensor& x, int64_t axis, bool keepdim = false);
Tensor mean(const Tensor& x, int64_t axis, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int64_t>& perm);
Tensor transpose(const Tensor& x, int64_t a, int64_t b);
Tensor concat(const std::vector<Tensor>& xs, int64_t axis);

// out[.., j, ..] = sum over taps[j] of weight * x[.., k, ..] along `axis`.
// Every resampling/indexing op (narrow, padding, interpolation, nearest
// upsampling, broadcasting along one axis) is an instance of this map.
using AxisTaps = std::vector<std::vector<std::pair<int64_t, double>>>;
Tensor axis_map(const Tensor& x, int64_t axis, const AxisTaps& taps);

Tensor narrow(const Tensor& x, int64_t axis, int64_t start, int64_t length);
Tensor repeat_axis(const Tensor& x, int64_t axis, int64_t times);  // x has extent 1 there
Tensor pad_replicate(const Tensor& x, int64_t axis, int64_t new_length);
Tensor resize_nearest(const Tensor& x, int64_t axis, int64_t out_length);
Tensor resize_linear(const Tensor& x, int64_t axis, int64_t out_length);  // half-pixel centers
Tensor mean_pool_axis(const Tensor& x, int64_t axis, int64_t factor);

// Factor upsampling of the last two dims.
Tensor upsample_nearest(const Tensor& x, int64_t factor);
Tensor upsample_bilinear(const Tensor& x, int64_t factor);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace diffsal
