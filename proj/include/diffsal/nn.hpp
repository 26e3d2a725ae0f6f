#pragma once

#include <string>
#include <utility>
#include <vector>

#include "diffsal/ops.hpp"
#include "diffsal/rng.hpp"
#include "diffsal/serialize.hpp"

namespace diffsal::nn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

// Appends `prefix + name` for each parameter.
void add_params(ParamList& out, const std::string& prefix, const ParamList& inner);
TensorDict to_dict(const ParamList& params);
// Copies values from `dict` into the existing parameter tensors. Missing
// names or shape mismatches throw.
void load_into(const ParamList& params, const TensorDict& dict);
int64_t count_parameters(const ParamList& params);

Tensor kaiming_uniform(const Shape& shape, int64_t fan_in, Rng& rng);
Tensor xavier_uniform(const Shape& shape, int64_t fan_in, int64_t fan_out, Rng& rng);

// y = x W + b over the last axis; any leading shape.
class Linear {
 public:
  Linear() = default;
  Linear(int64_t in, int64_t out, Rng& rng, bool xavier = true, bool bias = true);
  Tensor forward(const Tensor& x) const;
  ParamList params() const;
  int64_t in_features() const { return weight_.size(0); }
  int64_t out_features() const { return weight_.size(1); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_;  // [in, out]
  Tensor bias_;    // [out] or undefined
};

// Channels-first 3-D convolution layer on [C, T, H, W].
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(int64_t in, int64_t out, std::array<int64_t, 3> kernel, std::array<int64_t, 3> stride,
         std::array<int64_t, 3> padding, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
  ParamList params() const;
  Tensor& kernel() { return kernel_; }
  Tensor& bias() { return bias_; }
  int64_t out_channels() const { return kernel_.size(0); }

 private:
  Tensor kernel_;  // [out, in, kt, kh, kw]
  Tensor bias_;    // [out] or undefined
  Conv3dOptions opt_;
};

// Layer normalization over the last axis with learnable gain/bias.
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int64_t channels);
  Tensor forward(const Tensor& x) const;
  ParamList params() const;

 private:
  Tensor gain_, bias_;
};

// Group normalization with a single group on [C, T, H, W]; per-channel affine.
class GroupNorm1 {
 public:
  GroupNorm1() = default;
  explicit GroupNorm1(int64_t channels);
  Tensor forward(const Tensor& x) const;
  ParamList params() const;

 private:
  Tensor gain_, bias_;
};

// softmax(q k^T * scale) v over [heads, tokens, dim] tensors. When grad
// recording is off the query axis is processed in chunks to bound memory.
// `weights`, when non-null, receives the full attention matrix.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                            Tensor* weights = nullptr);

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(int64_t channels, int64_t heads, Rng& rng);
  // query [N, C], key/value [M, C] -> [N, C]
  Tensor forward(const Tensor& query, const Tensor& key, const Tensor& value, Tensor* weights = nullptr) const;
  ParamList params() const;
  int64_t heads() const { return heads_; }
  int64_t channels() const { return channels_; }
  Linear& wq() { return wq_; }
  Linear& wk() { return wk_; }
  Linear& wv() { return wv_; }
  Linear& wo() { return wo_; }
  const Linear& wq() const { return wq_; }
  const Linear& wk() const { return wk_; }
  const Linear& wv() const { return wv_; }
  const Linear& wo() const { return wo_; }

 private:
  Tensor split_heads(const Tensor& x) const;  // [N, C] -> [heads, N, C/heads]
  int64_t channels_ = 0;
  int64_t heads_ = 1;
  Linear wq_, wk_, wv_, wo_;
};

// Channels-last <-> channels-first for 4-D features.
inline Tensor to_channels_first(const Tensor& x) { return permute(x, {3, 0, 1, 2}); }
inline Tensor to_channels_last(const Tensor& x) { return permute(x, {1, 2, 3, 0}); }

}  // namespace diffsal::nn
