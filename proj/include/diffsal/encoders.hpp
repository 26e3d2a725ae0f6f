#pragma once

#include <cstdint>
#include <vector>

#include "diffsal/nn.hpp"

namespace diffsal::encoders {

inline constexpr int64_t kLevels = 4;

// Level i (0-based here) is channels-last (T_i, h_i, w_i, C_i).
struct VideoFeaturePyramid {
  std::vector<Tensor> levels;
};

// Shape of pyramid level `level` (0-based) for a T x H x W clip. Spatial
// extents are ceil(H / 2^(level+2)); time follows {T, T, T/2, T/4} rounded up.
Shape pyramid_shape(int64_t frames, int64_t height, int64_t width, int64_t c_base, int64_t level);
int64_t level_channels(int64_t c_base, int64_t level);

// Four stages of [conv3d 3x3x3 -> group norm -> ReLU] x 2 with channels
// c_base * {1, 2, 4, 8}.
class VideoEncoder {
 public:
  VideoEncoder() = default;
  VideoEncoder(int64_t c_base, Rng& rng);
  // clip [T, H, W, 3]
  VideoFeaturePyramid forward(const Tensor& clip) const;
  nn::ParamList params() const;
  int64_t c_base() const { return c_base_; }

 private:
  struct Stage {
    nn::Conv3d conv1, conv2;
    nn::GroupNorm1 norm1, norm2;
  };
  int64_t c_base_ = 0;
  std::vector<Stage> stages_;
};

// Fixed affine map applied to log-mel input so that typical values are O(1).
// Global level is preserved because loudness carries information.
inline constexpr double kLogMelShift = -5.0;
inline constexpr double kLogMelScale = 8.0;

// Per-slice conv stack -> 1x1 patch embedding -> positional embedding ->
// one pre-norm transformer block over all T_a * h_a * w_a tokens.
class AudioEncoder {
 public:
  AudioEncoder() = default;
  AudioEncoder(int64_t channels, int64_t heads, int64_t slices, Rng& rng);
  // slices [T_a, H_a, W_a, 1] -> (T_a, ceil(H_a/4), ceil(W_a/4), C_a)
  Tensor forward(const Tensor& slices) const;
  nn::ParamList params() const;
  int64_t channels() const { return channels_; }
  int64_t slices() const { return pos_.size(0); }
  Tensor& pos_embedding() { return pos_; }  // (T_a, 1, 1, C_a)

 private:
  int64_t channels_ = 0;
  nn::Conv3d conv1_, conv2_;
  nn::Linear patch_;
  Tensor pos_;
  nn::LayerNorm ln1_, ln2_;
  nn::MultiHeadAttention attn_;
  nn::Linear mlp1_, mlp2_;
};

// Self-attention over a token sequence [N, C].
Tensor msa(const Tensor& x, const nn::MultiHeadAttention& attn, Tensor* weights = nullptr);

}  // namespace diffsal::encoders
