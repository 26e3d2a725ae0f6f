#include "diffsal/unet.hpp"

#include <cmath>
#include <stdexcept>

namespace diffsal::unet {

namespace {

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

Tensor flatten_tokens(const Tensor& x) { return reshape(x, {-1, x.size(-1)}); }

}  // namespace

Fusion parse_fusion(const std::string& s) {
  if (s == "mim") return Fusion::kMim;
  if (s == "bilinear") return Fusion::kBilinear;
  if (s == "addition") return Fusion::kAddition;
  if (s == "concatenation") return Fusion::kConcatenation;
  throw std::invalid_argument("unknown fusion '" + s + "' (expected mim, bilinear, addition, concatenation)");
}

Attention parse_attention(const std::string& s) {
  if (s == "eca") return Attention::kEca;
  if (s == "sca") return Attention::kSca;
  throw std::invalid_argument("unknown attention '" + s + "' (expected eca, sca)");
}

Mode parse_mode(const std::string& s) {
  if (s == "av") return Mode::kAudioVisual;
  if (s == "video_only") return Mode::kVideoOnly;
  if (s == "audio_only") return Mode::kAudioOnly;
  throw std::invalid_argument("unknown mode '" + s + "' (expected av, video_only, audio_only)");
}

std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::kMim: return "mim";
    case Fusion::kBilinear: return "bilinear";
    case Fusion::kAddition: return "addition";
    case Fusion::kConcatenation: return "concatenation";
  }
  return "?";
}

std::string to_string(Attention a) { return a == Attention::kEca ? "eca" : "sca"; }

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kAudioVisual: return "av";
    case Mode::kVideoOnly: return "video_only";
    case Mode::kAudioOnly: return "audio_only";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (frames < 1) throw std::invalid_argument("model.frames must be positive");
  if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0) {
    throw std::invalid_argument("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                                " must be positive multiples of 4");
  }
  if (audio_slices < 1 || audio_height < 1 || audio_width < 1) {
    throw std::invalid_argument("audio slice shape must be positive");
  }
  if (c_base < 1) throw std::invalid_argument("model.c_base must be positive");
  if (stages != encoders::kLevels) throw std::invalid_argument("model.stages must be 4");
  if (heads < 1 || c_base % heads != 0 || audio_channels() % heads != 0) {
    throw std::invalid_argument("model.heads " + std::to_string(heads) + " must divide model.c_base " +
                                std::to_string(c_base));
  }
}

Shape ModelConfig::level_shape(int64_t level) const {
  return encoders::pyramid_shape(frames, height, width, c_base, level);
}

Shape ModelConfig::audio_shape() const {
  return {audio_slices, ceil_div(audio_height, 4), ceil_div(audio_width, 4), audio_channels()};
}

TimestepEmbedding::TimestepEmbedding(int64_t channels, Rng& rng) : channels_(channels) {
  if (channels < 2 || channels % 2 != 0) throw std::invalid_argument("timestep channels must be even");
  fc1_ = nn::Linear(channels, channels, rng);
  fc2_ = nn::Linear(channels, channels, rng);
}

Tensor TimestepEmbedding::sinusoidal(int64_t t, int64_t channels) {
  const int64_t half = channels / 2;
  std::vector<double> v(channels);
  for (int64_t j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
    v[j] = std::sin(static_cast<double>(t) * freq);
    v[half + j] = std::cos(static_cast<double>(t) * freq);
  }
  return Tensor({channels}, std::move(v));
}

Tensor TimestepEmbedding::forward(int64_t t) const {
  return fc2_.forward(gelu(fc1_.forward(reshape(sinusoidal(t, channels_), {1, channels_}))));
}

nn::ParamList TimestepEmbedding::params() const {
  nn::ParamList p;
  nn::add_params(p, "fc1.", fc1_.params());
  nn::add_params(p, "fc2.", fc2_.params());
  return p;
}

NoiseEncoder::NoiseEncoder(int64_t c_base, int64_t time_channels, Rng& rng, bool bias) {
  int64_t in = 1;
  for (int64_t i = 0; i < encoders::kLevels; ++i) {
    const int64_t out = encoders::level_channels(c_base, i);
    Stage s;
    if (i == 0) {
      // a 5x5 window and a 4x4 patch skip keep every input pixel in view at stride 4
      s.conv1 = nn::Conv3d(in, out, {1, 5, 5}, {1, 4, 4}, {0, 2, 2}, rng, bias);
      s.skip = nn::Conv3d(in, out, {1, 4, 4}, {1, 4, 4}, {0, 0, 0}, rng, bias);
    } else {
      s.conv1 = nn::Conv3d(in, out, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}, rng, bias);
      s.skip = nn::Conv3d(in, out, {1, 1, 1}, {1, 2, 2}, {0, 0, 0}, rng, bias);
    }
    s.conv2 = nn::Conv3d(out, out, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}, rng, bias);
    s.time = nn::Linear(time_channels, out, rng, true, bias);
    s.norm1 = nn::GroupNorm1(out);
    s.norm2 = nn::GroupNorm1(out);
    stages_.push_back(std::move(s));
    in = out;
  }
}

std::vector<Tensor> NoiseEncoder::forward(const Tensor& s_t, const Tensor& t_emb) const {
  if (s_t.dim() != 3 || s_t.size(2) != 1) throw ShapeError("noisy map must be [H, W, 1], got " + shape_str(s_t.shape()));
  Tensor x = reshape(s_t, {1, 1, s_t.size(0), s_t.size(1)});
  const Tensor emb = reshape(t_emb, {1, -1});
  std::vector<Tensor> levels;
  for (const Stage& s : stages_) {
    Tensor h = s.conv1.forward(x);
    h = add(h, reshape(s.time.forward(emb), {-1, 1, 1, 1}));
    h = relu(s.norm1.forward(h));
    h = s.norm2.forward(s.conv2.forward(h));
    x = relu(add(h, s.skip.forward(x)));
    const Tensor cl = nn::to_channels_last(x);
    levels.push_back(reshape(cl, {cl.size(1), cl.size(2), cl.size(3)}));
  }
  return levels;
}

nn::ParamList NoiseEncoder::params() const {
  nn::ParamList p;
  for (size_t i = 0; i < stages_.size(); ++i) {
    const std::string pre = "stage" + std::to_string(i + 1) + ".";
    nn::add_params(p, pre + "conv1.", stages_[i].conv1.params());
    nn::add_params(p, pre + "time.", stages_[i].time.params());
    nn::add_params(p, pre + "norm1.", stages_[i].norm1.params());
    nn::add_params(p, pre + "conv2.", stages_[i].conv2.params());
    nn::add_params(p, pre + "norm2.", stages_[i].norm2.params());
    nn::add_params(p, pre + "skip.", stages_[i].skip.params());
  }
  return p;
}

Tensor align_audio(const Tensor& fa_proj, int64_t frames, int64_t h, int64_t w) {
  if (fa_proj.dim() != 4) throw ShapeError("audio features must be (T_a, h_a, w_a, C), got " + shape_str(fa_proj.shape()));
  return resize_nearest(resize_nearest(resize_linear(fa_proj, 0, frames), 1, h), 2, w);
}

Tensor query_feature(const Tensor& f_v, const Tensor& f_s) {
  if (f_v.dim() != 4 || f_s.dim() != 3 || f_v.size(1) != f_s.size(0) || f_v.size(2) != f_s.size(1) ||
      f_v.size(3) != f_s.size(2)) {
    throw ShapeError("video level " + shape_str(f_v.shape()) + " and noise level " + shape_str(f_s.shape()) +
                     " are incompatible");
  }
  return concat({f_v, reshape(f_s, {1, f_s.size(0), f_s.size(1), f_s.size(2)})}, 0);
}

Tensor mim(const Tensor& q, const Tensor& fa_aligned, Tensor* mask) {
  if (q.shape() != fa_aligned.shape()) {
    throw ShapeError("mim shapes differ: " + shape_str(q.shape()) + " vs " + shape_str(fa_aligned.shape()));
  }
  const int64_t h = q.size(1), w = q.size(2);
  const Tensor pooled = mean(mean(mul(q, fa_aligned), 0), 2);  // [h, w]
  const Tensor m = reshape(softmax(reshape(pooled, {h * w}), 0), {1, h, w, 1});
  if (mask) *mask = reshape(m, {h, w}).detach();
  return mul(m, fa_aligned);
}

Stc::Stc(int64_t channels, int64_t k, std::array<int64_t, 3> extents, Rng& rng) : extents_(extents) {
  if (k < 1) throw std::invalid_argument("stc kernel must be positive");
  for (int a = 0; a < 3; ++a) {
    if (extents[a] < 1) throw ShapeError("stc extents must be positive");
    kernel_[a] = extents[a] <= k ? extents[a] : k;
    padded_[a] = ceil_div(extents[a], kernel_[a]) * kernel_[a];
  }
  conv_ = nn::Conv3d(channels, channels, kernel_, kernel_, {0, 0, 0}, rng);
  norm_ = nn::LayerNorm(channels);
}

std::array<int64_t, 3> Stc::output_extents() const {
  return {padded_[0] / kernel_[0], padded_[1] / kernel_[1], padded_[2] / kernel_[2]};
}

Tensor Stc::forward(const Tensor& x) const {
  if (x.dim() != 4 || x.size(0) != extents_[0] || x.size(1) != extents_[1] || x.size(2) != extents_[2]) {
    throw ShapeError("stc built for extents (" + std::to_string(extents_[0]) + ", " + std::to_string(extents_[1]) +
                     ", " + std::to_string(extents_[2]) + "), got " + shape_str(x.shape()));
  }
  Tensor y = x;
  for (int a = 0; a < 3; ++a) y = pad_replicate(y, a, padded_[a]);
  y = nn::to_channels_last(conv_.forward(nn::to_channels_first(y)));
  return use_norm ? norm_.forward(y) : y;
}

nn::ParamList Stc::params() const {
  nn::ParamList p;
  nn::add_params(p, "conv.", conv_.params());
  nn::add_params(p, "norm.", norm_.params());
  return p;
}

void Stc::set_identity() {
  if (kernel_ != std::array<int64_t, 3>{1, 1, 1}) throw std::logic_error("identity stc needs unit kernel");
  auto k = conv_.kernel().mutable_data();
  const int64_t c = conv_.out_channels();
  std::fill(k.begin(), k.end(), 0.0);
  for (int64_t i = 0; i < c; ++i) k[i * c + i] = 1.0;
  auto b = conv_.bias().mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
}

CrossAttention::CrossAttention(int64_t channels, int64_t heads, int64_t k, std::array<int64_t, 3> extents, Rng& rng)
    : pre_(channels), attn_(channels, heads, rng), stc_k_(channels, k, extents, rng), stc_v_(channels, k, extents, rng) {}

Tensor CrossAttention::attend(const Tensor& q_feat, const Tensor& keys, const Tensor& values, const Tensor& xq,
                              Tensor* weights) const {
  const Tensor o = attn_.forward(flatten_tokens(xq), flatten_tokens(keys), flatten_tokens(values), weights);
  return add(q_feat, reshape(o, q_feat.shape()));
}

Tensor CrossAttention::eca(const Tensor& q_feat, const Tensor& fused, Tensor* weights) const {
  if (q_feat.shape() != fused.shape()) {
    throw ShapeError("cross-attention shapes differ: " + shape_str(q_feat.shape()) + " vs " + shape_str(fused.shape()));
  }
  const Tensor xq = pre_.forward(q_feat);
  const Tensor& ks = swap_kv ? xq : fused;
  const Tensor& vs = swap_kv ? fused : xq;
  return attend(q_feat, stc_k_.forward(ks), stc_v_.forward(vs), xq, weights);
}

Tensor CrossAttention::sca(const Tensor& q_feat, const Tensor& fused, Tensor* weights) const {
  if (q_feat.shape() != fused.shape()) {
    throw ShapeError("cross-attention shapes differ: " + shape_str(q_feat.shape()) + " vs " + shape_str(fused.shape()));
  }
  const Tensor xq = pre_.forward(q_feat);
  return attend(q_feat, swap_kv ? xq : fused, swap_kv ? fused : xq, xq, weights);
}

nn::ParamList CrossAttention::params() const {
  nn::ParamList p;
  nn::add_params(p, "pre.", pre_.params());
  nn::add_params(p, "attn.", attn_.params());
  nn::add_params(p, "stc_k.", stc_k_.params());
  nn::add_params(p, "stc_v.", stc_v_.params());
  return p;
}

FusionBlock::FusionBlock(Fusion kind, int64_t channels, Rng& rng) : kind_(kind) {
  if (kind == Fusion::kBilinear) proj_ = nn::Linear(channels * channels, channels, rng);
  if (kind == Fusion::kConcatenation) proj_ = nn::Linear(2 * channels, channels, rng);
}

Tensor FusionBlock::forward(const Tensor& q, const Tensor& fa_aligned) const {
  if (q.shape() != fa_aligned.shape()) {
    throw ShapeError("fusion shapes differ: " + shape_str(q.shape()) + " vs " + shape_str(fa_aligned.shape()));
  }
  const int64_t c = q.size(-1);
  switch (kind_) {
    case Fusion::kMim: return mim(q, fa_aligned);
    case Fusion::kAddition: return add(q, fa_aligned);
    case Fusion::kConcatenation: return proj_.forward(concat({q, fa_aligned}, -1));
    case Fusion::kBilinear: {
      const int64_t n = q.numel() / c;
      const Tensor outer = mul(reshape(q, {n, c, 1}), reshape(fa_aligned, {n, 1, c}));
      return reshape(proj_.forward(reshape(outer, {n, c * c})), q.shape());
    }
  }
  throw std::logic_error("unhandled fusion");
}

nn::ParamList FusionBlock::params() const {
  nn::ParamList p;
  if (kind_ == Fusion::kBilinear || kind_ == Fusion::kConcatenation) {
    nn::add_params(p, "proj.", proj_.params());
  }
  return p;
}

int64_t stage_index(int64_t level) { return encoders::kLevels - level; }

int64_t stc_kernel(int64_t level) { return int64_t{1} << stage_index(level); }

MamStage::MamStage(const ModelConfig& cfg, int64_t level, Rng& rng)
    : level_(level), attention_(cfg.attention), has_prev_(level + 1 < encoders::kLevels) {
  const Shape s = cfg.level_shape(level);
  const int64_t c = s[3];
  if (has_prev_) up_proj_ = nn::Linear(2 * c, c, rng);
  audio_proj_ = nn::Linear(cfg.audio_channels(), c, rng);
  fusion_ = FusionBlock(cfg.fusion, c, rng);
  cross_ = CrossAttention(c, cfg.heads, stc_kernel(level), {s[0] + 1, s[1], s[2]}, rng);
  cross_.swap_kv = cfg.swap_kv;
  temporal_norm_ = nn::LayerNorm(c);
  temporal_conv_ = nn::Conv3d(c, c, {3, 1, 1}, {1, 1, 1}, {1, 0, 0}, rng);
}

Tensor MamStage::forward(const Tensor& x_prev, const Tensor& f_v, const Tensor& f_s, const Tensor& f_a) const {
  Tensor q = query_feature(f_v, f_s);
  const int64_t t1 = q.size(0), h = q.size(1), w = q.size(2);
  if (has_prev_) {
    if (!x_prev.defined()) throw std::logic_error("decoder stage needs the coarser stage output");
    const Tensor up = resize_nearest(resize_nearest(resize_linear(up_proj_.forward(x_prev), 0, t1), 1, h), 2, w);
    q = add(q, up);
  }
  const Tensor fa = align_audio(audio_proj_.forward(f_a), t1, h, w);
  const Tensor fused = fusion_.forward(q, fa);
  Tensor x = attention_ == Attention::kEca ? cross_.eca(q, fused) : cross_.sca(q, fused);
  const Tensor tc = temporal_conv_.forward(nn::to_channels_first(gelu(temporal_norm_.forward(x))));
  return add(x, nn::to_channels_last(tc));
}

nn::ParamList MamStage::params() const {
  nn::ParamList p;
  if (has_prev_) nn::add_params(p, "up.", up_proj_.params());
  nn::add_params(p, "audio.", audio_proj_.params());
  nn::add_params(p, "fusion.", fusion_.params());
  nn::add_params(p, "cross.", cross_.params());
  nn::add_params(p, "tnorm.", temporal_norm_.params());
  nn::add_params(p, "tconv.", temporal_conv_.params());
  return p;
}

SaliencyUNet::SaliencyUNet(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  temb_ = TimestepEmbedding(cfg.time_channels(), rng);
  noise_ = NoiseEncoder(cfg.c_base, cfg.time_channels(), rng);
  for (int64_t l = 0; l < encoders::kLevels; ++l) stages_.emplace_back(cfg, l, rng);
  head_norm_ = nn::LayerNorm(cfg.c_base);
  head_ = nn::Conv3d(cfg.c_base, 1, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}, rng);
  head_.bias().mutable_data()[0] = cfg.head_bias;
}

Tensor SaliencyUNet::forward(const Tensor& s_t, int64_t t, const Tensor& f_a,
                             const encoders::VideoFeaturePyramid& f_v) const {
  if (s_t.shape() != Shape{cfg_.height, cfg_.width, 1}) {
    throw ShapeError("noisy map shape " + shape_str(s_t.shape()) + " does not match configured frame " +
                     std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
  }
  if (f_a.shape() != cfg_.audio_shape()) {
    throw ShapeError("audio features " + shape_str(f_a.shape()) + ", expected " + shape_str(cfg_.audio_shape()));
  }
  if (static_cast<int64_t>(f_v.levels.size()) != encoders::kLevels) throw ShapeError("video pyramid needs 4 levels");
  for (int64_t l = 0; l < encoders::kLevels; ++l) {
    if (f_v.levels[l].shape() != cfg_.level_shape(l)) {
      throw ShapeError("video level " + std::to_string(l + 1) + " is " + shape_str(f_v.levels[l].shape()) +
                       ", expected " + shape_str(cfg_.level_shape(l)));
    }
  }
  const std::vector<Tensor> f_s = noise_.forward(s_t, temb_.forward(t));
  Tensor x;
  for (int64_t l = encoders::kLevels - 1; l >= 0; --l) x = stages_[l].forward(x, f_v.levels[l], f_s[l], f_a);
  const Tensor pooled = gelu(head_norm_.forward(mean(x, 0)));  // (h1, w1, C1)
  const Tensor cf = reshape(permute(pooled, {2, 0, 1}), {pooled.size(2), 1, pooled.size(0), pooled.size(1)});
  Tensor y = reshape(head_.forward(cf), {pooled.size(0), pooled.size(1)});
  y = resize_linear(resize_linear(y, 0, cfg_.height), 1, cfg_.width);
  return reshape(tanh(y), {cfg_.height, cfg_.width, 1});
}

nn::ParamList SaliencyUNet::params() const {
  nn::ParamList p;
  nn::add_params(p, "temb.", temb_.params());
  nn::add_params(p, "noise.", noise_.params());
  for (size_t l = 0; l < stages_.size(); ++l) nn::add_params(p, "mam" + std::to_string(l + 1) + ".", stages_[l].params());
  nn::add_params(p, "head_norm.", head_norm_.params());
  nn::add_params(p, "head.", head_.params());
  return p;
}

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  Rng vr(seed, 0, "video"), ar(seed, 0, "audio"), ur(seed, 0, "unet");
  video_ = encoders::VideoEncoder(cfg.c_base, vr);
  audio_ = encoders::AudioEncoder(cfg.audio_channels(), cfg.heads, cfg.audio_slices, ar);
  unet_ = SaliencyUNet(cfg, ur);
}

Conditioning Model::condition(const Tensor& clip, const Tensor& slices) const {
  if (clip.shape() != Shape{cfg_.frames, cfg_.height, cfg_.width, 3}) {
    throw ShapeError("clip shape " + shape_str(clip.shape()) + " does not match model config");
  }
  if (slices.shape() != Shape{cfg_.audio_slices, cfg_.audio_height, cfg_.audio_width, 1}) {
    throw ShapeError("audio slices " + shape_str(slices.shape()) + " do not match model config");
  }
  Conditioning c;
  if (cfg_.mode == Mode::kVideoOnly) {
    c.f_a = Tensor::zeros(cfg_.audio_shape());
  } else {
    c.f_a = audio_.forward(slices);
  }
  if (cfg_.mode == Mode::kAudioOnly) {
    for (int64_t l = 0; l < encoders::kLevels; ++l) c.f_v.levels.push_back(Tensor::zeros(cfg_.level_shape(l)));
  } else {
    c.f_v = video_.forward(clip);
  }
  return c;
}

Tensor Model::denoise(const Tensor& s_t, int64_t t, const Conditioning& c) const {
  return unet_.forward(s_t, t, c.f_a, c.f_v);
}

nn::ParamList Model::encoder_params() const {
  nn::ParamList p;
  nn::add_params(p, "video.", video_.params());
  nn::add_params(p, "audio.", audio_.params());
  return p;
}

nn::ParamList Model::params() const {
  nn::ParamList p = encoder_params();
  nn::add_params(p, "unet.", unet_.params());
  return p;
}

}  // namespace diffsal::unet
