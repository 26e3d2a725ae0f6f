#include <cmath>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "diffsal/ops.hpp"
#include "diffsal/serialize.hpp"

using namespace diffsal;
using diffsal::testing::gradcheck;
using diffsal::testing::weighted_sum;

namespace {

Tensor rand_t(const Shape& s, uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform(s, -1.0, 1.0, rng);
}

void check_values(const Tensor& t, const std::vector<double>& expected, double tol = 1e-12) {
  REQUIRE(t.numel() == static_cast<int64_t>(expected.size()));
  for (size_t i = 0; i < expected.size(); ++i) CHECK(t.data()[i] == doctest::Approx(expected[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("tensor construction validates shape and data length") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 6);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {1, 2, 3, 4});
    check_values(matmul(eye, m), {1, 2, 3, 4});
  }
  SUBCASE("row times column") { check_values(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})), {11}); }
  SUBCASE("shape mismatch names both shapes") {
    try {
      matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
      FAIL("expected throw");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("(2, 3)") != std::string::npos);
      CHECK(msg.find("(4, 2)") != std::string::npos);
    }
  }
  SUBCASE("gradient of sum vs finite differences") {
    auto r = gradcheck([](const auto& in) { return sum_all(matmul(in[0], in[1])); },
                       {rand_t({4, 5}, 1), rand_t({5, 3}, 2)});
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("broadcast batch gradient") {
    auto r = gradcheck([](const auto& in) { return weighted_sum(matmul(in[0], in[1])); },
                       {rand_t({2, 3, 4}, 3), rand_t({4, 2}, 4)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("conv2d") {
  SUBCASE("delta kernel is identity") {
    Tensor x = rand_t({1, 5, 5}, 5);
    Tensor k = Tensor::zeros({1, 1, 3, 3});
    k.mutable_data()[4] = 1.0;
    CHECK(max_abs_diff(conv2d(x, k, 1, 1), x) == 0.0);
  }
  SUBCASE("all-ones 2x2 stride 2") {
    check_values(conv2d(Tensor({1, 2, 2}, {1, 2, 3, 4}), Tensor::ones({1, 1, 2, 2}), 2, 0), {10});
  }
  SUBCASE("kernel larger than padded input") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), ShapeError);
  }
  SUBCASE("output size law") {
    Tensor y = conv2d(Tensor::zeros({2, 7, 9}), Tensor::zeros({3, 2, 3, 3}), 2, 1);
    CHECK(y.shape() == Shape{3, 4, 5});
  }
  SUBCASE("gradient check on 2-channel 6x6") {
    auto r = gradcheck([](const auto& in) { return weighted_sum(conv2d(in[0], in[1], 2, 1)); },
                       {rand_t({2, 6, 6}, 6), rand_t({3, 2, 3, 3}, 7)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("conv3d") {
  SUBCASE("delta kernel is identity") {
    Tensor x = rand_t({2, 3, 4, 4}, 8);
    Tensor k = Tensor::zeros({2, 2, 3, 3, 3});
    for (int c = 0; c < 2; ++c) k.mutable_data()[(c * 2 + c) * 27 + 13] = 1.0;
    Conv3dOptions opt;
    opt.padding = {1, 1, 1};
    CHECK(max_abs_diff(conv3d(x, k, opt), x) == 0.0);
  }
  SUBCASE("constant cube with kernel = stride = 2") {
    const double c = 1.5;
    Tensor x = Tensor::full({1, 4, 4, 4}, c);
    Conv3dOptions opt;
    opt.stride = {2, 2, 2};
    Tensor y = conv3d(x, Tensor::ones({1, 1, 2, 2, 2}), opt);
    CHECK(y.shape() == Shape{1, 2, 2, 2});
    for (double v : y.data()) CHECK(v == 8 * c);
  }
  SUBCASE("gradient check on 1x4x4x4") {
    Conv3dOptions opt;
    opt.stride = {1, 2, 1};
    opt.padding = {1, 0, 1};
    auto r = gradcheck([&](const auto& in) { return weighted_sum(conv3d(in[0], in[1], opt)); },
                       {rand_t({1, 4, 4, 4}, 9), rand_t({2, 1, 3, 2, 3}, 10)});
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("pointwise kernel gradient") {
    auto r = gradcheck([](const auto& in) { return weighted_sum(conv3d(in[0], in[1])); },
                       {rand_t({3, 2, 2, 2}, 11), rand_t({2, 3, 1, 1, 1}, 12)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("conv3d over several column chunks matches direct summation") {
  // 108 rows x 4096 columns per output step exceeds the column budget, so
  // the 12 output steps are processed in more than one chunk
  const int64_t C = 4, T = 12, H = 64, W = 64, O = 2;
  Tensor x = rand_t({C, T, H, W}, 21).set_requires_grad();
  Tensor k = rand_t({O, C, 3, 3, 3}, 22).set_requires_grad();
  Conv3dOptions opt;
  opt.padding = {1, 1, 1};
  const Tensor y = conv3d(x, k, opt);
  const Tensor g = rand_t(y.shape(), 23);
  sum_all(mul(y, g)).backward();
  auto in = [&](int64_t c, int64_t t, int64_t h, int64_t w) {
    return (t < 0 || t >= T || h < 0 || h >= H || w < 0 || w >= W) ? 0.0 : x.data()[((c * T + t) * H + h) * W + w];
  };
  std::vector<double> gk(k.numel(), 0.0), gx(x.numel(), 0.0);
  double worst = 0;
  for (int64_t o = 0; o < O; ++o)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          double acc = 0;
          const double go = g.data()[((o * T + t) * H + h) * W + w];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t a = 0; a < 3; ++a)
              for (int64_t b = 0; b < 3; ++b)
                for (int64_t d = 0; d < 3; ++d) {
                  const int64_t ki = (((o * C + c) * 3 + a) * 3 + b) * 3 + d;
                  const double v = in(c, t + a - 1, h + b - 1, w + d - 1);
                  acc += k.data()[ki] * v;
                  gk[ki] += go * v;
                  const int64_t it = t + a - 1, ih = h + b - 1, iw = w + d - 1;
                  if (it >= 0 && it < T && ih >= 0 && ih < H && iw >= 0 && iw < W) {
                    gx[((c * T + it) * H + ih) * W + iw] += go * k.data()[ki];
                  }
                }
          worst = std::max(worst, std::abs(acc - y.data()[((o * T + t) * H + h) * W + w]));
        }
  CHECK(worst < 1e-12);
  double wk = 0, wx = 0;
  for (int64_t i = 0; i < k.numel(); ++i) wk = std::max(wk, std::abs(gk[i] - k.grad()[i]));
  for (int64_t i = 0; i < x.numel(); ++i) wx = std::max(wx, std::abs(gx[i] - x.grad()[i]));
  CHECK(wk < 1e-9);
  CHECK(wx < 1e-12);
}

TEST_CASE("softmax") {
  check_values(softmax(Tensor({3}, {0, 0, 0}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  check_values(softmax(Tensor({2}, {1000, 1000}), 0), {0.5, 0.5});
  // mpmath at 40 digits
  check_values(softmax(Tensor({3}, {1, 2, 3}), 0),
               {0.0900305731703804579980221, 0.2447284710547976524729596, 0.6652409557748218895290183}, 1e-14);

  SUBCASE("rows sum to one along any axis") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      Tensor x = scale(rand_t({3, 4, 5}, seed), 30.0);
      for (int axis = 0; axis < 3; ++axis) {
        Tensor s = sum(softmax(x, axis), axis);
        for (double v : s.data()) CHECK(std::abs(v - 1.0) < 1e-12);
      }
    }
  }
  SUBCASE("gradient") {
    auto r = gradcheck([](const auto& in) { return weighted_sum(softmax(in[0], 1)); }, {rand_t({3, 4, 2}, 13)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("layer_norm") {
  SUBCASE("constant vector maps to zeros") {
    Tensor y = layer_norm(Tensor::full({4}, 3.0), 1, Tensor::ones({4}), Tensor::zeros({4}));
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("two-point standardization") {
    Tensor y = layer_norm(Tensor({2}, {1, 3}), 1, {}, {});
    const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
    check_values(y, {-expect, expect});
  }
  SUBCASE("zero mean and unit variance over normalized axes") {
    Tensor y = layer_norm(scale(rand_t({5, 3, 8}, 14), 10.0), 2, {}, {});
    for (int64_t o = 0; o < 5; ++o) {
      double m = 0, v = 0;
      for (int64_t i = 0; i < 24; ++i) m += y.data()[o * 24 + i];
      m /= 24;
      for (int64_t i = 0; i < 24; ++i) v += std::pow(y.data()[o * 24 + i] - m, 2);
      v /= 24;
      CHECK(std::abs(m) < 1e-10);
      CHECK(std::abs(v - 1.0) < 1e-4);
    }
  }
  SUBCASE("gain shape mismatch") {
    CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 4}), 1, Tensor::ones({3}), Tensor::zeros({3})), ShapeError);
  }
  SUBCASE("gradient on random 8-vector with affine") {
    auto r = gradcheck([](const auto& in) { return weighted_sum(layer_norm(in[0], 1, in[1], in[2])); },
                       {rand_t({8}, 15), rand_t({8}, 16), rand_t({8}, 17)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("elementwise suite") {
  Tensor a = rand_t({2, 3}, 18);
  CHECK(max_abs_diff(mul(a, Tensor::ones({2, 3})), a) == 0.0);
  check_values(relu(Tensor({2}, {-1, 2})), {0, 2});
  check_values(sigmoid(Tensor({1}, {0})), {0.5});
  CHECK(add(Tensor::zeros({4, 1, 3}), Tensor::zeros({2, 1})).shape() == Shape{4, 2, 3});
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);

  SUBCASE("broadcast (T,h,w,C) * (1,h,w,C) gradient") {
    auto r = gradcheck([](const auto& in) { return weighted_sum(mul(in[0], in[1])); },
                       {rand_t({3, 2, 2, 4}, 19), rand_t({1, 2, 2, 4}, 20)});
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("unary gradients") {
    auto r = gradcheck(
        [](const auto& in) {
          const Tensor& x = in[0];
          return weighted_sum(concat({gelu(x), sigmoid(x), tanh(x), exp(x), square(x), scale(x, -2.5),
                                      add_scalar(x, 0.3), log(add_scalar(square(x), 1.0)), div(x, add_scalar(square(x), 2.0)),
                                      sub(x, relu(x))},
                                     0));
        },
        {rand_t({3, 4}, 21)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("reduce suite") {
  check_values(mean(Tensor({2}, {2, 4}), 0), {3});
  CHECK_THROWS_AS(sum(Tensor::zeros({3, 0}), 1), ShapeError);
  CHECK(sum(Tensor::ones({2, 3, 4}), 1, true).shape() == Shape{2, 1, 4});

  SUBCASE("gradient of mean distributes 1/n") {
    Tensor x = rand_t({5}, 22).set_requires_grad();
    mean_all(x).backward();
    for (double g : x.grad()) CHECK(g == doctest::Approx(0.2).epsilon(1e-15));
    auto r = gradcheck([](const auto& in) { return weighted_sum(mean(in[0], 1)); }, {rand_t({3, 4, 2}, 23)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("upsample_nearest") {
  Tensor x = rand_t({2, 3, 4}, 24);
  CHECK(max_abs_diff(upsample_nearest(x, 1), x) == 0.0);
  check_values(upsample_nearest(Tensor({1, 2}, {1, 2}), 2), {1, 1, 2, 2, 1, 1, 2, 2});
  SUBCASE("mean downsample inverts upsample") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      Tensor y = rand_t({3, static_cast<int64_t>(2 + seed % 3), static_cast<int64_t>(1 + seed % 4)}, 100 + seed);
      Tensor up = upsample_nearest(y, 2);
      Tensor down = mean_pool_axis(mean_pool_axis(up, -1, 2), -2, 2);
      CHECK(max_abs_diff(down, y) < 1e-15);
    }
  }
  SUBCASE("resampling gradients") {
    auto r = gradcheck(
        [](const auto& in) {
          return weighted_sum(concat({reshape(upsample_nearest(in[0], 2), {-1}), reshape(upsample_bilinear(in[0], 3), {-1}),
                                     reshape(resize_linear(in[0], 0, 5), {-1}), reshape(pad_replicate(in[0], 1, 4), {-1})},
                                    0));
        },
        {rand_t({2, 3, 2}, 25)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("concat, reshape, transpose") {
  Tensor a = rand_t({3, 2, 2, 4}, 26);
  Tensor b = rand_t({1, 2, 2, 4}, 27);
  CHECK(concat({a, b}, 0).shape() == Shape{4, 2, 2, 4});
  CHECK(max_abs_diff(concat({a}, 0), a) == 0.0);
  CHECK_THROWS_AS(concat({a, rand_t({1, 2, 3, 4}, 28)}, 0), ShapeError);
  Tensor p = permute(a, {3, 0, 2, 1});
  CHECK(p.shape() == Shape{4, 3, 2, 2});
  CHECK(p.at({1, 2, 0, 1}) == a.at({2, 1, 0, 1}));
  CHECK(max_abs_diff(transpose(transpose(a, 1, 3), 1, 3), a) == 0.0);

  SUBCASE("gradient splits back to inputs") {
    auto r = gradcheck(
        [](const auto& in) {
          return weighted_sum(permute(reshape(concat({in[0], in[1]}, 2), {2, 2, -1}), {2, 0, 1}));
        },
        {rand_t({2, 2, 3}, 29), rand_t({2, 2, 1}, 30)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("backward") {
  SUBCASE("sum gives ones; sum of squares gives 2x") {
    Tensor x = rand_t({4}, 31).set_requires_grad();
    sum_all(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);
    x.zero_grad();
    sum_all(mul(x, x)).backward();
    for (int64_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]).epsilon(1e-15));
  }
  SUBCASE("repeated calls accumulate") {
    Tensor x = rand_t({3}, 32).set_requires_grad();
    Tensor loss = sum_all(scale(x, 3.0));
    loss.backward();
    loss.backward();
    for (double g : x.grad()) CHECK(g == 6.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tensor x = rand_t({3}, 33).set_requires_grad();
    CHECK_THROWS_AS(scale(x, 2.0).backward(), ShapeError);
  }
  SUBCASE("only requires_grad tensors receive gradients") {
    Tensor x = rand_t({3}, 34).set_requires_grad();
    Tensor c = rand_t({3}, 35);
    sum_all(mul(x, c)).backward();
    CHECK(x.has_grad());
    CHECK_FALSE(c.has_grad());
  }
  SUBCASE("tape is topological") {
    Tensor x = rand_t({2, 2}, 36).set_requires_grad();
    Tensor y = relu(matmul(x, x));
    Tensor loss = sum_all(add(y, x));
    GradTape tape = GradTape::record(loss);
    CHECK(tape.size() == 4);
    for (size_t i = 0; i < tape.size(); ++i)
      for (const auto& in : tape.nodes()[i]->grad_fn->inputs) {
        if (!in->grad_fn) continue;
        bool earlier = false;
        for (size_t j = 0; j < i; ++j) earlier = earlier || tape.nodes()[j] == in;
        CHECK(earlier);
      }
  }
  SUBCASE("three-layer composite network") {
    auto r = gradcheck(
        [](const auto& in) {
          Tensor h = gelu(add(matmul(in[0], in[1]), in[2]));
          h = layer_norm(h, 1, {}, {});
          h = tanh(matmul(h, in[3]));
          return mean_all(square(sub(softmax(matmul(h, in[4]), 1), Tensor::full({4, 2}, 0.5))));
        },
        {rand_t({4, 3}, 37), rand_t({3, 5}, 38), rand_t({5}, 39), rand_t({5, 4}, 40), rand_t({4, 2}, 41)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("operations are deterministic") {
  Tensor x = rand_t({2, 3, 5, 5}, 42);
  Tensor k = rand_t({4, 2, 2, 3, 3}, 43);
  Conv3dOptions opt;
  opt.padding = {1, 1, 1};
  Tensor y1 = softmax(conv3d(x, k, opt), 0);
  Tensor y2 = softmax(conv3d(x, k, opt), 0);
  CHECK(y1.to_vector() == y2.to_vector());
}

TEST_CASE("DSTN round trip and byte layout") {
  Tensor t({2, 3}, {1, -2, 3.5, 4, 5, 6});
  std::ostringstream os(std::ios::binary);
  write_dstn(os, t);
  const std::string bytes = os.str();
  REQUIRE(bytes.size() == 4 + 2 + 2 * 4 + 6 * 4);
  CHECK(bytes.substr(0, 4) == "DSTN");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 2);
  CHECK(static_cast<unsigned char>(bytes[6]) == 2);
  CHECK(static_cast<unsigned char>(bytes[10]) == 3);
  std::istringstream is(bytes, std::ios::binary);
  Tensor back = read_dstn(is);
  CHECK(back.shape() == t.shape());
  CHECK(back.to_vector() == t.to_vector());

  std::istringstream bad(std::string("XXXX"), std::ios::binary);
  CHECK_THROWS(read_dstn(bad));
}
