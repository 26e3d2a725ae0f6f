#include "diffsal/encoders.hpp"

#include <string>

namespace diffsal::encoders {

namespace {

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

// Temporal stride of the first conv of each stage.
constexpr int64_t kTimeStride[kLevels] = {1, 1, 2, 2};

}  // namespace

int64_t level_channels(int64_t c_base, int64_t level) { return c_base << level; }

Shape pyramid_shape(int64_t frames, int64_t height, int64_t width, int64_t c_base, int64_t level) {
  if (level < 0 || level >= kLevels) throw std::out_of_range("pyramid level " + std::to_string(level));
  int64_t t = frames;
  for (int64_t i = 0; i <= level; ++i) t = ceil_div(t, kTimeStride[i]);
  const int64_t f = int64_t{4} << level;
  return {t, ceil_div(height, f), ceil_div(width, f), level_channels(c_base, level)};
}

VideoEncoder::VideoEncoder(int64_t c_base, Rng& rng) : c_base_(c_base) {
  if (c_base < 1) throw std::invalid_argument("c_base must be positive");
  int64_t in = 3;
  for (int64_t i = 0; i < kLevels; ++i) {
    const int64_t out = level_channels(c_base, i);
    Stage s;
    s.conv1 = nn::Conv3d(in, out, {3, 3, 3}, {kTimeStride[i], 2, 2}, {1, 1, 1}, rng);
    const int64_t s2 = i == 0 ? 2 : 1;  // stage 1 reaches H/4 with two strided convs
    s.conv2 = nn::Conv3d(out, out, {3, 3, 3}, {1, s2, s2}, {1, 1, 1}, rng);
    s.norm1 = nn::GroupNorm1(out);
    s.norm2 = nn::GroupNorm1(out);
    stages_.push_back(std::move(s));
    in = out;
  }
}

VideoFeaturePyramid VideoEncoder::forward(const Tensor& clip) const {
  if (clip.dim() != 4 || clip.size(3) != 3 || clip.size(0) < 1) {
    throw ShapeError("video clip must be [T, H, W, 3], got " + shape_str(clip.shape()));
  }
  if (clip.size(1) % 4 != 0 || clip.size(2) % 4 != 0) {
    throw ShapeError("video frame size must be divisible by 4, got " + shape_str(clip.shape()));
  }
  VideoFeaturePyramid pyr;
  Tensor x = nn::to_channels_first(clip);
  for (const Stage& s : stages_) {
    x = relu(s.norm1.forward(s.conv1.forward(x)));
    x = relu(s.norm2.forward(s.conv2.forward(x)));
    pyr.levels.push_back(nn::to_channels_last(x));
  }
  return pyr;
}

nn::ParamList VideoEncoder::params() const {
  nn::ParamList p;
  for (size_t i = 0; i < stages_.size(); ++i) {
    const std::string pre = "stage" + std::to_string(i + 1) + ".";
    nn::add_params(p, pre + "conv1.", stages_[i].conv1.params());
    nn::add_params(p, pre + "norm1.", stages_[i].norm1.params());
    nn::add_params(p, pre + "conv2.", stages_[i].conv2.params());
    nn::add_params(p, pre + "norm2.", stages_[i].norm2.params());
  }
  return p;
}

AudioEncoder::AudioEncoder(int64_t channels, int64_t heads, int64_t slices, Rng& rng) : channels_(channels) {
  if (channels < 2 || channels % 2 != 0) throw std::invalid_argument("audio channels must be even");
  if (slices < 1) throw std::invalid_argument("audio slice count must be positive");
  conv1_ = nn::Conv3d(1, channels / 2, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}, rng);
  conv2_ = nn::Conv3d(channels / 2, channels, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}, rng);
  patch_ = nn::Linear(channels, channels, rng, false);
  pos_ = Tensor::zeros({slices, 1, 1, channels}).set_requires_grad();
  ln1_ = nn::LayerNorm(channels);
  ln2_ = nn::LayerNorm(channels);
  attn_ = nn::MultiHeadAttention(channels, heads, rng);
  mlp1_ = nn::Linear(channels, 2 * channels, rng);
  mlp2_ = nn::Linear(2 * channels, channels, rng);
}

Tensor AudioEncoder::forward(const Tensor& slices) const {
  if (slices.dim() != 4 || slices.size(3) != 1) {
    throw ShapeError("audio slices must be [T_a, H_a, W_a, 1], got " + shape_str(slices.shape()));
  }
  if (slices.size(0) != pos_.size(0)) {
    throw ShapeError("audio encoder built for " + std::to_string(pos_.size(0)) + " slices, got " +
                     shape_str(slices.shape()));
  }
  Tensor x = scale(add_scalar(nn::to_channels_first(slices), -kLogMelShift), 1.0 / kLogMelScale);
  x = relu(conv1_.forward(x));
  x = relu(conv2_.forward(x));
  x = add(patch_.forward(nn::to_channels_last(x)), pos_);
  const Shape shape = x.shape();
  Tensor tokens = reshape(x, {-1, channels_});
  tokens = add(tokens, msa(ln1_.forward(tokens), attn_));
  tokens = add(tokens, mlp2_.forward(gelu(mlp1_.forward(ln2_.forward(tokens)))));
  return reshape(tokens, shape);
}

nn::ParamList AudioEncoder::params() const {
  nn::ParamList p;
  nn::add_params(p, "conv1.", conv1_.params());
  nn::add_params(p, "conv2.", conv2_.params());
  nn::add_params(p, "patch.", patch_.params());
  p.push_back({"pos", pos_});
  nn::add_params(p, "ln1.", ln1_.params());
  nn::add_params(p, "attn.", attn_.params());
  nn::add_params(p, "ln2.", ln2_.params());
  nn::add_params(p, "mlp1.", mlp1_.params());
  nn::add_params(p, "mlp2.", mlp2_.params());
  return p;
}

Tensor msa(const Tensor& x, const nn::MultiHeadAttention& attn, Tensor* weights) {
  return attn.forward(x, x, x, weights);
}

}  // namespace diffsal::encoders
