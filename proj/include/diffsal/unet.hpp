#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "diffsal/encoders.hpp"
#include "diffsal/nn.hpp"

namespace diffsal::unet {

enum class Fusion { kMim, kBilinear, kAddition, kConcatenation };
enum class Attention { kEca, kSca };
enum class Mode { kAudioVisual, kVideoOnly, kAudioOnly };

Fusion parse_fusion(const std::string& s);
Attention parse_attention(const std::string& s);
Mode parse_mode(const std::string& s);
std::string to_string(Fusion f);
std::string to_string(Attention a);
std::string to_string(Mode m);

struct ModelConfig {
  int64_t frames = 16;
  int64_t height = 32;
  int64_t width = 48;
  int64_t audio_slices = 4;
  int64_t audio_height = 40;  // frames per slice
  int64_t audio_width = 40;   // mel bins
  int64_t c_base = 8;
  int64_t heads = 2;
  int64_t stages = 4;
  Fusion fusion = Fusion::kMim;
  Attention attention = Attention::kEca;
  Mode mode = Mode::kAudioVisual;
  bool swap_kv = false;  // keys from the query stream, values from the fused stream
  double head_bias = -3.0;  // initial pre-tanh bias of the head, i.e. a near-empty map

  void validate() const;
  int64_t audio_channels() const { return 2 * c_base; }
  int64_t time_channels() const { return 4 * c_base; }
  Shape level_shape(int64_t level) const;  // video pyramid level (T, h, w, C)
  Shape audio_shape() const;               // (T_a, h_a, w_a, C_a)
};

// Sinusoidal features of t followed by Linear -> GELU -> Linear.
class TimestepEmbedding {
 public:
  TimestepEmbedding() = default;
  TimestepEmbedding(int64_t channels, Rng& rng);
  Tensor forward(int64_t t) const;  // [C_t]
  nn::ParamList params() const;
  static Tensor sinusoidal(int64_t t, int64_t channels);

 private:
  int64_t channels_ = 0;
  nn::Linear fc1_, fc2_;
};

// Residual stages over the noisy map; level i is (h_i, w_i, C_i).
class NoiseEncoder {
 public:
  NoiseEncoder() = default;
  NoiseEncoder(int64_t c_base, int64_t time_channels, Rng& rng, bool bias = true);
  // s_t [H, W, 1], t_emb [C_t]
  std::vector<Tensor> forward(const Tensor& s_t, const Tensor& t_emb) const;
  nn::ParamList params() const;

 private:
  struct Stage {
    nn::Conv3d conv1, conv2, skip;
    nn::Linear time;
    nn::GroupNorm1 norm1, norm2;
  };
  std::vector<Stage> stages_;
};

// Resamples projected audio features to a (T, h, w, C) query grid:
// linear in time, nearest in space.
Tensor align_audio(const Tensor& fa_proj, int64_t frames, int64_t h, int64_t w);

// q = concat(f_v, f_s[None]) along time.
Tensor query_feature(const Tensor& f_v, const Tensor& f_s);

// Audio-gated spatial mask: softmax over h*w of the time and channel mean
// of q * fa. Returns mask * fa; `mask` receives the [h, w] mask.
Tensor mim(const Tensor& q, const Tensor& fa_aligned, Tensor* mask = nullptr);

// Strided conv3d with kernel = stride = k per axis, then layer norm over
// channels. Axes not divisible by k are replicate-padded. An axis whose
// extent is at most k becomes a single window with kernel equal to the
// extent, which represents the same family of maps as padding up to k.
class Stc {
 public:
  Stc() = default;
  Stc(int64_t channels, int64_t k, std::array<int64_t, 3> extents, Rng& rng);
  Tensor forward(const Tensor& x) const;  // (T, h, w, C) -> (T', h', w', C)
  nn::ParamList params() const;
  std::array<int64_t, 3> output_extents() const;
  std::array<int64_t, 3> kernel() const { return kernel_; }
  nn::Conv3d& conv() { return conv_; }
  void set_identity();  // requires k = 1
  bool use_norm = true;

 private:
  std::array<int64_t, 3> extents_{}, kernel_{}, padded_{};
  nn::Conv3d conv_;
  nn::LayerNorm norm_;
};

// Pre-norm cross-attention with residual. Queries and (by default) values
// come from q_feat, keys from the fused feature.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(int64_t channels, int64_t heads, int64_t k, std::array<int64_t, 3> extents, Rng& rng);
  Tensor eca(const Tensor& q_feat, const Tensor& fused, Tensor* weights = nullptr) const;
  Tensor sca(const Tensor& q_feat, const Tensor& fused, Tensor* weights = nullptr) const;
  nn::ParamList params() const;
  nn::MultiHeadAttention& attention() { return attn_; }
  Stc& stc_key() { return stc_k_; }
  Stc& stc_value() { return stc_v_; }
  bool swap_kv = false;

 private:
  Tensor attend(const Tensor& q_feat, const Tensor& keys, const Tensor& values, const Tensor& xq,
                Tensor* weights) const;
  nn::LayerNorm pre_;
  nn::MultiHeadAttention attn_;
  Stc stc_k_, stc_v_;
};

// Fusion of the query feature with aligned audio, producing f_avs.
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(Fusion kind, int64_t channels, Rng& rng);
  Tensor forward(const Tensor& q, const Tensor& fa_aligned) const;
  nn::ParamList params() const;
  Fusion kind() const { return kind_; }
  nn::Linear& projection() { return proj_; }

 private:
  Fusion kind_ = Fusion::kMim;
  nn::Linear proj_;  // bilinear: C^2 -> C, concatenation: 2C -> C
};

// Decoder stages are numbered 1..4 in execution order, coarse to fine, so
// stage s runs on pyramid level 4 - s (0-based) with STC kernel 2^s.
int64_t stage_index(int64_t level);
int64_t stc_kernel(int64_t level);

// One decoder stage at pyramid level `level` (0-based).
class MamStage {
 public:
  MamStage() = default;
  MamStage(const ModelConfig& cfg, int64_t level, Rng& rng);
  // x_prev is the coarser stage output or undefined for the coarsest stage.
  Tensor forward(const Tensor& x_prev, const Tensor& f_v, const Tensor& f_s, const Tensor& f_a) const;
  nn::ParamList params() const;
  CrossAttention& cross_attention() { return cross_; }

 private:
  int64_t level_ = 0;
  Attention attention_ = Attention::kEca;
  bool has_prev_ = false;
  nn::Linear up_proj_;
  nn::Linear audio_proj_;
  FusionBlock fusion_;
  CrossAttention cross_;
  nn::LayerNorm temporal_norm_;
  nn::Conv3d temporal_conv_;
};

// g_psi(S_t, t, f_a, f_v) -> S0 estimate [H, W, 1] in [-1, 1].
class SaliencyUNet {
 public:
  SaliencyUNet() = default;
  SaliencyUNet(const ModelConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& s_t, int64_t t, const Tensor& f_a, const encoders::VideoFeaturePyramid& f_v) const;
  nn::ParamList params() const;
  const ModelConfig& config() const { return cfg_; }
  std::vector<MamStage>& stages() { return stages_; }

 private:
  ModelConfig cfg_;
  TimestepEmbedding temb_;
  NoiseEncoder noise_;
  std::vector<MamStage> stages_;  // index = pyramid level
  nn::LayerNorm head_norm_;
  nn::Conv3d head_;
};

struct Conditioning {
  Tensor f_a;
  encoders::VideoFeaturePyramid f_v;
};

// Encoders plus denoiser. The modality mode replaces the dropped stream
// with zeros of the right shape.
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, uint64_t seed);
  // clip [T, H, W, 3], slices [T_a, H_a, W_a, 1]
  Conditioning condition(const Tensor& clip, const Tensor& slices) const;
  Tensor denoise(const Tensor& s_t, int64_t t, const Conditioning& c) const;
  nn::ParamList params() const;
  nn::ParamList encoder_params() const;
  const ModelConfig& config() const { return cfg_; }
  SaliencyUNet& unet() { return unet_; }
  encoders::AudioEncoder& audio_encoder() { return audio_; }
  encoders::VideoEncoder& video_encoder() { return video_; }

 private:
  ModelConfig cfg_;
  encoders::VideoEncoder video_;
  encoders::AudioEncoder audio_;
  SaliencyUNet unet_;
};

}  // namespace diffsal::unet
