#include <cmath>

#include "doctest.h"
#include "diffsal/unet.hpp"
#include "gradcheck.hpp"

using namespace diffsal;
using namespace diffsal::unet;

namespace {

ModelConfig mini() {
  ModelConfig c;
  c.frames = 2;
  c.height = c.width = 8;
  c.audio_slices = 2;
  c.audio_height = c.audio_width = 8;
  c.c_base = 4;
  c.head_bias = 0.0;
  return c;
}

encoders::VideoFeaturePyramid random_pyramid(const ModelConfig& c, Rng& rng) {
  encoders::VideoFeaturePyramid p;
  for (int64_t l = 0; l < encoders::kLevels; ++l) p.levels.push_back(Tensor::uniform(c.level_shape(l), -1, 1, rng));
  return p;
}

double grad_norm(const Tensor& t) {
  double s = 0;
  for (double g : t.grad()) s += g * g;
  return std::sqrt(s);
}

void check_row_stochastic(const Tensor& w) {
  const int64_t m = w.size(-1), rows = w.numel() / m;
  double worst = 0;
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (int64_t j = 0; j < m; ++j) s += w.data()[r * m + j];
    worst = std::max(worst, std::abs(s - 1.0));
  }
  CHECK(worst < 1e-12);
}

}  // namespace

TEST_CASE("decoder stage numbering and STC kernels") {
  CHECK(stage_index(3) == 1);
  CHECK(stage_index(0) == 4);
  CHECK(stc_kernel(3) == 2);
  CHECK(stc_kernel(0) == 16);
}

TEST_CASE("timestep embedding is deterministic and depends on t") {
  Rng rng(1);
  TimestepEmbedding e(16, rng);
  CHECK(e.forward(10).to_vector() == e.forward(10).to_vector());
  CHECK(max_abs_diff(e.forward(10), e.forward(11)) > 1e-6);
  const Tensor s = TimestepEmbedding::sinusoidal(0, 8);
  for (int64_t j = 0; j < 4; ++j) {
    CHECK(s.data()[j] == 0.0);
    CHECK(s.data()[4 + j] == 1.0);
  }
}

TEST_CASE("noise encoder matches the video pyramid at full scale") {
  Rng rng(2);
  NoiseEncoder enc(4, 16, rng);
  NoGradGuard ng;
  const auto levels = enc.forward(Tensor::randn({224, 384, 1}, rng), Tensor::randn({16}, rng));
  const Shape want[4] = {{56, 96, 4}, {28, 48, 8}, {14, 24, 16}, {7, 12, 32}};
  REQUIRE(levels.size() == 4);
  for (int l = 0; l < 4; ++l) CHECK(levels[l].shape() == want[l]);
}

TEST_CASE("noise encoder depends on the timestep embedding") {
  Rng rng(3);
  NoiseEncoder enc(2, 8, rng);
  const Tensor s = Tensor::randn({16, 16, 1}, rng);
  const auto a = enc.forward(s, Tensor::randn({8}, rng));
  const auto b = enc.forward(s, Tensor::randn({8}, rng));
  for (int l = 0; l < 4; ++l) CHECK(max_abs_diff(a[l], b[l]) > 1e-6);
}

TEST_CASE("bias-free noise encoder maps zeros to zeros") {
  Rng rng(4);
  NoiseEncoder enc(2, 8, rng, false);
  const auto levels = enc.forward(Tensor::zeros({16, 16, 1}), Tensor::zeros({8}));
  for (const auto& l : levels)
    for (double v : l.data()) CHECK(v == 0.0);
}

TEST_CASE("mim mask") {
  Rng rng(5);
  SUBCASE("all-ones inputs give a uniform mask") {
    Tensor mask;
    const Tensor out = mim(Tensor::ones({3, 4, 5, 2}), Tensor::ones({3, 4, 5, 2}), &mask);
    for (double v : mask.data()) CHECK(std::abs(v - 1.0 / 20.0) < 1e-15);
    for (double v : out.data()) CHECK(std::abs(v - 1.0 / 20.0) < 1e-15);
  }
  SUBCASE("mask sums to one") {
    for (int trial = 0; trial < 10; ++trial) {
      Tensor mask;
      mim(Tensor::randn({4, 3, 6, 5}, rng), Tensor::randn({4, 3, 6, 5}, rng), &mask);
      double s = 0;
      for (double v : mask.data()) s += v;
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  SUBCASE("one location carrying all energy dominates") {
    Tensor q = Tensor::zeros({3, 4, 4, 2}), fa = Tensor::zeros({3, 4, 4, 2});
    auto qd = q.mutable_data(), fd = fa.mutable_data();
    for (int64_t t = 0; t < 3; ++t)
      for (int64_t c = 0; c < 2; ++c) {
        const int64_t i = ((t * 4 + 1) * 4 + 2) * 2 + c;
        qd[i] = 4.0;
        fd[i] = 4.0;
      }
    Tensor mask;
    mim(q, fa, &mask);
    CHECK(mask.at({1, 2}) > 0.99);
  }
  SUBCASE("shape mismatch") { CHECK_THROWS_AS(mim(Tensor::ones({2, 2, 2, 2}), Tensor::ones({3, 2, 2, 2})), ShapeError); }
}

TEST_CASE("audio alignment and query construction") {
  Rng rng(6);
  const Tensor fa = Tensor::randn({4, 3, 3, 2}, rng);
  CHECK(align_audio(fa, 9, 6, 5).shape() == Shape{9, 6, 5, 2});
  const Tensor q = query_feature(Tensor::randn({4, 2, 3, 5}, rng), Tensor::randn({2, 3, 5}, rng));
  CHECK(q.shape() == Shape{5, 2, 3, 5});
  CHECK_THROWS_AS(query_feature(Tensor::randn({4, 2, 3, 5}, rng), Tensor::randn({2, 2, 5}, rng)), ShapeError);
}

TEST_CASE("stc") {
  Rng rng(7);
  SUBCASE("unit kernel with identity conv and no norm is the identity") {
    Stc s(3, 1, {4, 5, 6}, rng);
    s.set_identity();
    s.use_norm = false;
    const Tensor x = Tensor::randn({4, 5, 6, 3}, rng);
    CHECK(max_abs_diff(s.forward(x), x) == 0.0);
  }
  SUBCASE("k=2 halves every axis") {
    Stc s(3, 2, {4, 8, 8}, rng);
    CHECK(s.forward(Tensor::randn({4, 8, 8, 3}, rng)).shape() == Shape{2, 4, 4, 3});
  }
  SUBCASE("token count falls by k^3 on divisible extents") {
    for (int64_t k : {2, 4, 8, 16}) {
      const std::array<int64_t, 3> e{k, 2 * k, 3 * k};
      Stc s(2, k, e, rng);
      const auto o = s.output_extents();
      CHECK(e[0] * e[1] * e[2] == k * k * k * o[0] * o[1] * o[2]);
    }
    Stc s(2, 2, {4, 4, 6}, rng);
    CHECK(s.forward(Tensor::randn({4, 4, 6, 2}, rng)).numel() / 2 == 4 * 4 * 6 / 8);
  }
  SUBCASE("indivisible axes are replicate padded") {
    Stc s(2, 2, {5, 3, 4}, rng);
    CHECK(s.forward(Tensor::randn({5, 3, 4, 2}, rng)).shape() == Shape{3, 2, 2, 2});
    CHECK_THROWS_AS(s.forward(Tensor::randn({4, 3, 4, 2}, rng)), ShapeError);
  }
  SUBCASE("short axes equal a full kernel on replicate padding") {
    // extents (3, 1, 2) with k = 4: a 4x4x4 kernel on the padded input folds
    // into a 3x1x2 kernel on the raw input
    const int64_t c = 2;
    Stc s(c, 4, {3, 1, 2}, rng);
    s.use_norm = false;
    REQUIRE(s.kernel() == std::array<int64_t, 3>{3, 1, 2});
    const Tensor big = Tensor::randn({c, c, 4, 4, 4}, rng);
    auto folded = s.conv().kernel().mutable_data();
    std::fill(folded.begin(), folded.end(), 0.0);
    for (int64_t o = 0; o < c; ++o)
      for (int64_t i = 0; i < c; ++i)
        for (int64_t a = 0; a < 4; ++a)
          for (int64_t b = 0; b < 4; ++b)
            for (int64_t d = 0; d < 4; ++d) {
              const int64_t fa = std::min<int64_t>(a, 2), fb = 0, fd = std::min<int64_t>(d, 1);
              folded[(((o * c + i) * 3 + fa) * 1 + fb) * 2 + fd] += big.at({o, i, a, b, d});
            }
    const Tensor x = Tensor::randn({3, 1, 2, c}, rng);
    Tensor padded = x;
    for (int a = 0; a < 3; ++a) padded = pad_replicate(padded, a, 4);
    Conv3dOptions opt;
    opt.stride = {4, 4, 4};
    const Tensor want = conv3d(nn::to_channels_first(padded), big, opt);
    const Tensor got = nn::to_channels_first(s.forward(x));
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("cross attention") {
  Rng rng(8);
  SUBCASE("eca equals sca under identity compression") {
    for (int trial = 0; trial < 20; ++trial) {
      const int64_t heads = rng.uniform_int(1, 2), c = heads * rng.uniform_int(1, 3);
      const std::array<int64_t, 3> e{rng.uniform_int(1, 4), rng.uniform_int(1, 4), rng.uniform_int(1, 4)};
      Rng init(trial);
      CrossAttention ca(c, heads, 1, e, init);
      ca.swap_kv = trial % 2 == 1;
      for (Stc* s : {&ca.stc_key(), &ca.stc_value()}) {
        s->set_identity();
        s->use_norm = false;
      }
      const Tensor q = Tensor::randn({e[0], e[1], e[2], c}, rng), f = Tensor::randn({e[0], e[1], e[2], c}, rng);
      CHECK(max_abs_diff(ca.eca(q, f), ca.sca(q, f)) < 1e-6);
    }
  }
  SUBCASE("attention weights are row-stochastic") {
    CrossAttention ca(4, 2, 2, {4, 4, 4}, rng);
    const Tensor q = Tensor::randn({4, 4, 4, 4}, rng), f = Tensor::randn({4, 4, 4, 4}, rng);
    Tensor w;
    ca.eca(q, f, &w);
    CHECK(w.shape() == Shape{2, 64, 8});
    check_row_stochastic(w);
    ca.sca(q, f, &w);
    CHECK(w.shape() == Shape{2, 64, 64});
    check_row_stochastic(w);
  }
  SUBCASE("single token sca is the value projection plus residual") {
    CrossAttention ca(4, 2, 1, {1, 1, 1}, rng);
    const Tensor q = Tensor::randn({1, 1, 1, 4}, rng), f = Tensor::randn({1, 1, 1, 4}, rng);
    nn::LayerNorm ln(4);
    const Tensor xq = reshape(ln.forward(q), {1, 4});
    const Tensor want = add(reshape(q, {1, 4}), ca.attention().wo().forward(ca.attention().wv().forward(xq)));
    CHECK(max_abs_diff(reshape(ca.sca(q, f), {1, 4}), want) < 1e-12);
  }
  SUBCASE("deterministic and swap-sensitive") {
    CrossAttention ca(4, 2, 2, {2, 4, 4}, rng);
    const Tensor q = Tensor::randn({2, 4, 4, 4}, rng), f = Tensor::randn({2, 4, 4, 4}, rng);
    const Tensor a = ca.eca(q, f);
    CHECK(a.to_vector() == ca.eca(q, f).to_vector());
    ca.swap_kv = true;
    CHECK(max_abs_diff(a, ca.eca(q, f)) > 1e-6);
  }
}

TEST_CASE("baseline fusions") {
  Rng rng(9);
  const Tensor q = Tensor::randn({2, 3, 3, 4}, rng);
  SUBCASE("addition with zero audio leaves q unchanged") {
    FusionBlock f(Fusion::kAddition, 4, rng);
    CHECK(max_abs_diff(f.forward(q, Tensor::zeros(q.shape())), q) == 0.0);
  }
  SUBCASE("concatenation projects back to C") {
    FusionBlock f(Fusion::kConcatenation, 4, rng);
    CHECK(f.forward(q, Tensor::randn(q.shape(), rng)).shape() == q.shape());
  }
  SUBCASE("bilinear on one-hot inputs selects one projection row") {
    FusionBlock f(Fusion::kBilinear, 4, rng);
    auto b = f.projection().bias().mutable_data();
    for (auto& v : b) v = rng.uniform(-1, 1);
    for (int64_t a = 0; a < 4; ++a)
      for (int64_t c = 0; c < 4; ++c) {
        Tensor qa = Tensor::zeros({1, 1, 1, 4}), fa = Tensor::zeros({1, 1, 1, 4});
        qa.mutable_data()[a] = 2.0;
        fa.mutable_data()[c] = 3.0;
        const Tensor out = f.forward(qa, fa);
        for (int64_t o = 0; o < 4; ++o) {
          const double want = 6.0 * f.projection().weight().at({a * 4 + c, o}) + f.projection().bias().at({o});
          CHECK(std::abs(out.data()[o] - want) < 1e-12);
        }
      }
  }
  SUBCASE("mim fusion has no parameters") { CHECK(FusionBlock(Fusion::kMim, 4, rng).params().empty()); }
  CHECK(parse_fusion("bilinear") == Fusion::kBilinear);
  CHECK_THROWS(parse_fusion("sum"));
  CHECK(parse_mode("video_only") == Mode::kVideoOnly);
  CHECK(parse_attention("sca") == Attention::kSca);
}

TEST_CASE("denoiser output contract") {
  const ModelConfig c = mini();
  Rng rng(10);
  SaliencyUNet net(c, rng);
  const Tensor s = Tensor::randn({8, 8, 1}, rng), fa = Tensor::randn(c.audio_shape(), rng);
  const auto fv = random_pyramid(c, rng);
  const Tensor y = net.forward(s, 100, fa, fv);
  CHECK(y.shape() == Shape{8, 8, 1});
  for (double v : y.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK(y.to_vector() == net.forward(s, 100, fa, fv).to_vector());
  CHECK_THROWS_AS(net.forward(Tensor::randn({8, 4, 1}, rng), 1, fa, fv), ShapeError);
  CHECK_THROWS_AS(net.forward(s, 1, Tensor::randn({2, 2, 2, 4}, rng), fv), ShapeError);
}

TEST_CASE("modality modes and baseline variants produce finite maps") {
  Rng rng(11);
  ModelConfig c = mini();
  c.frames = 4;
  c.height = 16;
  c.width = 16;
  const Tensor clip = Tensor::uniform({4, 16, 16, 3}, 0, 1, rng);
  const Tensor sl = Tensor::uniform({2, 8, 8, 1}, -10, 5, rng);
  const Tensor s = Tensor::randn({16, 16, 1}, rng);
  for (Mode m : {Mode::kAudioVisual, Mode::kVideoOnly, Mode::kAudioOnly})
    for (Fusion f : {Fusion::kMim, Fusion::kBilinear, Fusion::kAddition, Fusion::kConcatenation})
      for (Attention a : {Attention::kEca, Attention::kSca}) {
        c.mode = m;
        c.fusion = f;
        c.attention = a;
        Model model(c, 3);
        const Conditioning cond = model.condition(clip, sl);
        if (m == Mode::kVideoOnly)
          for (double v : cond.f_a.data()) CHECK(v == 0.0);
        if (m == Mode::kAudioOnly)
          for (double v : cond.f_v.levels[0].data()) CHECK(v == 0.0);
        CHECK(model.denoise(s, 500, cond).all_finite());
      }
}

TEST_CASE("every parameter receives gradient") {
  Rng rng(12);
  ModelConfig c;
  c.c_base = 4;
  Model model(c, 5);
  const Tensor clip = Tensor::uniform({16, 32, 48, 3}, 0, 1, rng);
  const Tensor sl = Tensor::uniform({4, 40, 40, 1}, -10, 5, rng);
  const Tensor y = model.denoise(Tensor::randn({32, 48, 1}, rng), 300, model.condition(clip, sl));
  mean_all(square(sub(y, Tensor::uniform(y.shape(), -1, 1, rng)))).backward();
  int dead = 0;
  for (const auto& p : model.params()) {
    if (grad_norm(p.tensor) == 0.0) {
      ++dead;
      MESSAGE("no gradient for " << p.name);
    }
  }
  CHECK(dead == 0);
}

TEST_CASE("full denoiser gradient matches finite differences") {
  const ModelConfig c = mini();
  Rng rng(13);
  SaliencyUNet net(c, rng);
  const auto fv = random_pyramid(c, rng);
  std::vector<Tensor> inputs{Tensor::randn({8, 8, 1}, rng), Tensor::randn(c.audio_shape(), rng)};
  for (const auto& l : fv.levels) inputs.push_back(l);
  const size_t n_feats = inputs.size();
  for (const auto& p : net.params()) inputs.push_back(p.tensor);
  const auto r = testing::gradcheck(
      [&](const std::vector<Tensor>& in) {
        encoders::VideoFeaturePyramid p;
        for (size_t i = 2; i < n_feats; ++i) p.levels.push_back(in[i]);
        return testing::weighted_sum(net.forward(in[0], 250, in[1], p));
      },
      inputs, 1e-5, 8);
  MESSAGE("full model relative error " << r.max_rel_error);
  CHECK(r.max_rel_error < 1e-5);
}
