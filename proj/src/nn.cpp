#include "diffsal/nn.hpp"

#include <cmath>

namespace diffsal::nn {

void add_params(ParamList& out, const std::string& prefix, const ParamList& inner) {
  for (const auto& p : inner) out.push_back({prefix + p.name, p.tensor});
}

TensorDict to_dict(const ParamList& params) {
  TensorDict d;
  for (const auto& p : params) {
    if (!d.emplace(p.name, p.tensor).second) throw std::logic_error("duplicate parameter name " + p.name);
  }
  return d;
}

void load_into(const ParamList& params, const TensorDict& dict) {
  for (const auto& p : params) {
    auto it = dict.find(p.name);
    if (it == dict.end()) throw std::runtime_error("checkpoint is missing parameter " + p.name);
    if (it->second.shape() != p.tensor.shape()) {
      throw ShapeError("checkpoint parameter " + p.name + " has shape " + shape_str(it->second.shape()) +
                       ", model expects " + shape_str(p.tensor.shape()));
    }
    Tensor dst = p.tensor;
    auto d = dst.mutable_data();
    std::copy(it->second.data().begin(), it->second.data().end(), d.begin());
  }
}

int64_t count_parameters(const ParamList& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

Tensor kaiming_uniform(const Shape& shape, int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor::uniform(shape, -bound, bound, rng).set_requires_grad();
}

Tensor xavier_uniform(const Shape& shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::uniform(shape, -bound, bound, rng).set_requires_grad();
}

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool xavier, bool bias) {
  weight_ = xavier ? xavier_uniform({in, out}, in, out, rng) : kaiming_uniform({in, out}, in, rng);
  if (bias) bias_ = Tensor::zeros({out}).set_requires_grad();
}

Tensor Linear::forward(const Tensor& x) const {
  const int64_t in = weight_.size(0);
  if (x.size(-1) != in) {
    throw ShapeError("Linear expects last dim " + std::to_string(in) + ", got " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = weight_.size(1);
  Tensor y = matmul(x.dim() == 2 ? x : reshape(x, {-1, in}), weight_);
  if (bias_.defined()) y = add(y, bias_);
  return x.dim() == 2 ? y : reshape(y, out_shape);
}

ParamList Linear::params() const {
  ParamList p{{"weight", weight_}};
  if (bias_.defined()) p.push_back({"bias", bias_});
  return p;
}

Conv3d::Conv3d(int64_t in, int64_t out, std::array<int64_t, 3> kernel, std::array<int64_t, 3> stride,
               std::array<int64_t, 3> padding, Rng& rng, bool bias) {
  const int64_t fan_in = in * kernel[0] * kernel[1] * kernel[2];
  kernel_ = kaiming_uniform({out, in, kernel[0], kernel[1], kernel[2]}, fan_in, rng);
  if (bias) bias_ = Tensor::zeros({out}).set_requires_grad();
  opt_.stride = stride;
  opt_.padding = padding;
}

Tensor Conv3d::forward(const Tensor& x) const {
  Tensor y = conv3d(x, kernel_, opt_);
  if (bias_.defined()) y = add(y, reshape(bias_, {-1, 1, 1, 1}));
  return y;
}

ParamList Conv3d::params() const {
  ParamList p{{"kernel", kernel_}};
  if (bias_.defined()) p.push_back({"bias", bias_});
  return p;
}

LayerNorm::LayerNorm(int64_t channels)
    : gain_(Tensor::ones({channels}).set_requires_grad()), bias_(Tensor::zeros({channels}).set_requires_grad()) {}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, 1, gain_, bias_); }

ParamList LayerNorm::params() const { return {{"gain", gain_}, {"bias", bias_}}; }

GroupNorm1::GroupNorm1(int64_t channels)
    : gain_(Tensor::ones({channels}).set_requires_grad()), bias_(Tensor::zeros({channels}).set_requires_grad()) {}

Tensor GroupNorm1::forward(const Tensor& x) const {
  Tensor y = layer_norm(x, 4, {}, {});
  return add(mul(y, reshape(gain_, {-1, 1, 1, 1})), reshape(bias_, {-1, 1, 1, 1}));
}

ParamList GroupNorm1::params() const { return {{"gain", gain_}, {"bias", bias_}}; }

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale_factor, Tensor* weights) {
  if (q.dim() != 3 || k.dim() != 3 || v.dim() != 3 || q.size(0) != k.size(0) || k.size(1) != v.size(1) ||
      q.size(2) != k.size(2)) {
    throw ShapeError("attention shapes incompatible: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  }
  const Tensor kt = transpose(k, 1, 2);
  const int64_t n = q.size(1), m = k.size(1);
  constexpr int64_t kChunkEntries = int64_t{1} << 22;
  if (GradMode::enabled() || weights != nullptr || n * m * q.size(0) <= kChunkEntries) {
    Tensor a = softmax(scale(matmul(q, kt), scale_factor), -1);
    if (weights) *weights = a;
    return matmul(a, v);
  }
  const int64_t rows = std::max<int64_t>(1, kChunkEntries / (m * q.size(0)));
  std::vector<Tensor> parts;
  for (int64_t start = 0; start < n; start += rows) {
    const int64_t len = std::min(rows, n - start);
    Tensor a = softmax(scale(matmul(narrow(q, 1, start, len), kt), scale_factor), -1);
    parts.push_back(matmul(a, v));
  }
  return concat(parts, 1);
}

MultiHeadAttention::MultiHeadAttention(int64_t channels, int64_t heads, Rng& rng)
    : channels_(channels), heads_(heads) {
  if (heads < 1 || channels % heads != 0) {
    throw ShapeError("attention channels " + std::to_string(channels) + " not divisible by heads " +
                     std::to_string(heads));
  }
  wq_ = Linear(channels, channels, rng);
  wk_ = Linear(channels, channels, rng);
  wv_ = Linear(channels, channels, rng);
  wo_ = Linear(channels, channels, rng);
}

Tensor MultiHeadAttention::split_heads(const Tensor& x) const {
  const int64_t n = x.size(0);
  return permute(reshape(x, {n, heads_, channels_ / heads_}), {1, 0, 2});
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& key, const Tensor& value,
                                   Tensor* weights) const {
  if (query.dim() != 2 || key.dim() != 2 || value.dim() != 2 || query.size(1) != channels_ ||
      key.size(1) != channels_ || value.size(1) != channels_ || key.size(0) != value.size(0)) {
    throw ShapeError("attention channel mismatch: query " + shape_str(query.shape()) + ", key " +
                     shape_str(key.shape()) + ", value " + shape_str(value.shape()) + ", channels " +
                     std::to_string(channels_));
  }
  const Tensor q = split_heads(wq_.forward(query));
  const Tensor k = split_heads(wk_.forward(key));
  const Tensor v = split_heads(wv_.forward(value));
  const double s = 1.0 / std::sqrt(static_cast<double>(channels_ / heads_));
  Tensor o = scaled_dot_attention(q, k, v, s, weights);  // [heads, N, d]
  o = reshape(permute(o, {1, 0, 2}), {query.size(0), channels_});
  return wo_.forward(o);
}

ParamList MultiHeadAttention::params() const {
  ParamList p;
  add_params(p, "wq.", wq_.params());
  add_params(p, "wk.", wk_.params());
  add_params(p, "wv.", wv_.params());
  add_params(p, "wo.", wo_.params());
  return p;
}

}  // namespace diffsal::nn
