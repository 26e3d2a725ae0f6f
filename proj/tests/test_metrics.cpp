#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "diffsal/metrics.hpp"
#include "diffsal/rng.hpp"

using namespace diffsal;
using namespace diffsal::metrics;
namespace fs = std::filesystem;

namespace {

struct QuietWarnings {
  int count = 0;
  WarningHandler prev;
  QuietWarnings() {
    prev = set_warning_handler([this](const std::string&) { ++count; });
  }
  ~QuietWarnings() { set_warning_handler(prev); }
};

Tensor rand_map(int64_t h, int64_t w, Rng& rng, int levels = 0) {
  Tensor t = Tensor::uniform({h, w}, 0, 1, rng);
  if (levels > 0) {
    auto d = t.mutable_data();
    for (double& v : d) v = std::floor(v * levels) / levels;
  }
  return t;
}

FixationSet rand_fix(int64_t h, int64_t w, int k, Rng& rng) {
  FixationSet f;
  for (int i = 0; i < k; ++i) f.push_back({rng.uniform_int(0, h - 1), rng.uniform_int(0, w - 1)});
  return f;
}

// P(fixated > non-fixated) + half the ties, by direct pair counting.
double auc_pairwise(const Tensor& p, const FixationSet& fix) {
  const int64_t w = p.size(1);
  std::vector<bool> fixated(p.numel(), false);
  for (const auto& f : fix) fixated[f.row * w + f.col] = true;
  double wins = 0, pairs = 0;
  for (const auto& f : fix) {
    const double a = p.data()[f.row * w + f.col];
    for (int64_t j = 0; j < p.numel(); ++j) {
      if (fixated[j]) continue;
      const double b = p.data()[j];
      wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
      pairs += 1;
    }
  }
  return wins / pairs;
}

double direct_cc(const Tensor& a, const Tensor& b) {
  const double n = static_cast<double>(a.numel());
  long double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    sa += a.data()[i], sb += b.data()[i];
    sab += static_cast<long double>(a.data()[i]) * b.data()[i];
    saa += static_cast<long double>(a.data()[i]) * a.data()[i];
    sbb += static_cast<long double>(b.data()[i]) * b.data()[i];
  }
  const long double cov = sab / n - sa / n * sb / n;
  return static_cast<double>(cov / std::sqrt((saa / n - sa / n * sa / n) * (sbb / n - sb / n * sb / n)));
}

Tensor affine(const Tensor& t, double a, double b) {
  std::vector<double> v = t.to_vector();
  for (double& x : v) x = a * x + b;
  return Tensor(t.shape(), v);
}

}  // namespace

TEST_CASE("cc") {
  Rng rng(1);
  const Tensor q = rand_map(6, 7, rng);
  CHECK(cc(q, q) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(cc(affine(q, -1, 1), q) == doctest::Approx(-1.0).epsilon(1e-14));
  for (int i = 0; i < 20; ++i) {
    const Tensor a = rand_map(5, 9, rng), b = rand_map(5, 9, rng);
    CHECK(std::abs(cc(a, b) - direct_cc(a, b)) < 1e-12);
    CHECK(std::abs(cc(affine(a, 3.5, -2.0), b) - cc(a, b)) < 1e-12);
  }
  QuietWarnings qw;
  CHECK(cc(Tensor::full({3, 3}, 0.2), rand_map(3, 3, rng)) == 0.0);
  CHECK(qw.count == 1);
  CHECK_THROWS_AS(cc(rand_map(3, 3, rng), rand_map(3, 4, rng)), ShapeError);
  CHECK(cc(Tensor({2, 2, 1}, {0, 1, 2, 3}), Tensor({2, 2}, {0, 1, 2, 3})) == doctest::Approx(1.0));
}

TEST_CASE("nss") {
  Rng rng(2);
  QuietWarnings qw;
  CHECK(nss(Tensor::full({4, 4}, 0.3), {{1, 1}}) == 0.0);
  SUBCASE("one-hot at the single fixation") {
    const int64_t n = 20;
    std::vector<double> v(n, 0.0);
    v[7] = 1.0;
    const double mean = 1.0 / n;
    const double sd = std::sqrt((std::pow(1.0 - mean, 2) + (n - 1) * mean * mean) / n);
    CHECK(nss(Tensor({4, 5}, v), {{1, 2}}) == doctest::Approx((1.0 - 1.0 / n) / sd).epsilon(1e-13));
  }
  SUBCASE("affine invariance") {
    const Tensor p = rand_map(6, 6, rng);
    const auto f = rand_fix(6, 6, 5, rng);
    CHECK(std::abs(nss(affine(p, 4.0, 1.5), f) - nss(p, f)) < 1e-12);
  }
  CHECK_THROWS(nss(rand_map(3, 3, rng), {}));
  CHECK_THROWS(nss(rand_map(3, 3, rng), {{3, 0}}));
}

TEST_CASE("auc judd") {
  Rng rng(3);
  QuietWarnings qw;
  SUBCASE("perfect ranking and chance") {
    Tensor p = Tensor::zeros({4, 4});
    p.mutable_data()[5] = 0.9;
    p.mutable_data()[10] = 0.7;
    CHECK(auc_judd(p, {{1, 1}, {2, 2}}) == doctest::Approx(1.0));
    CHECK(auc_judd(Tensor::full({4, 4}, 0.5), {{0, 0}, {3, 2}}) == doctest::Approx(0.5));
  }
  SUBCASE("pairwise oracle on random small maps with ties") {
    for (int i = 0; i < 300; ++i) {
      const int64_t h = rng.uniform_int(2, 8), w = rng.uniform_int(2, 8);
      const Tensor p = rand_map(h, w, rng, i % 3 == 0 ? 3 : 0);
      const auto f = rand_fix(h, w, static_cast<int>(rng.uniform_int(1, 6)), rng);
      if (static_cast<int64_t>(f.size()) >= h * w) continue;
      CHECK(std::abs(auc_judd(p, f) - auc_pairwise(p, f)) < 1e-9);
    }
  }
  SUBCASE("monotone invariance") {
    const Tensor p = rand_map(7, 7, rng);
    const auto f = rand_fix(7, 7, 6, rng);
    std::vector<double> v = p.to_vector();
    for (double& x : v) x = std::exp(3.0 * x) - 0.2;
    CHECK(std::abs(auc_judd(Tensor(p.shape(), v), f) - auc_judd(p, f)) < 1e-12);
  }
  CHECK_THROWS(auc_judd(rand_map(3, 3, rng), {}));
}

TEST_CASE("sim and kl") {
  Rng rng(4);
  const Tensor q = rand_map(5, 6, rng);
  CHECK(sim(q, q) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(kl_div(q, q) == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
  {
    std::vector<double> a(30, 0.0), b(30, 0.0);
    for (int i = 0; i < 15; ++i) a[i] = 1.0;
    for (int i = 15; i < 30; ++i) b[i] = 2.0;
    CHECK(sim(Tensor({5, 6}, a), Tensor({5, 6}, b)) == 0.0);
  }
  for (int i = 0; i < 20; ++i) {
    const Tensor a = rand_map(4, 4, rng), b = rand_map(4, 4, rng);
    double sa = 0, sb = 0;
    for (int64_t k = 0; k < 16; ++k) sa += a.data()[k], sb += b.data()[k];
    double s = 0, kl = 0;
    for (int64_t k = 0; k < 16; ++k) {
      const double pa = a.data()[k] / sa, qb = b.data()[k] / sb;
      s += std::min(pa, qb);
      kl += qb * std::log(qb / (pa + 1e-8));
    }
    CHECK(std::abs(sim(a, b) - s) < 1e-12);
    CHECK(std::abs(kl_div(a, b) - kl) < 1e-12);
    CHECK(kl_div(a, b) >= -1e-7);
    // Only normalized densities matter.
    CHECK(std::abs(sim(affine(a, 7.0, 0.0), affine(b, 0.3, 0.0)) - sim(a, b)) < 1e-12);
    CHECK(std::abs(kl_div(affine(a, 7.0, 0.0), affine(b, 0.3, 0.0)) - kl_div(a, b)) < 1e-12);
  }
  SUBCASE("uniform target against a one-hot prediction") {
    const int64_t n = 16;
    std::vector<double> one(n, 0.0);
    one[3] = 1.0;
    const double ref = (1.0 / n) * std::log((1.0 / n) / (1.0 + 1e-8)) + (n - 1.0) / n * std::log((1.0 / n) / 1e-8);
    CHECK(kl_div(Tensor({4, 4}, one), Tensor::ones({4, 4})) == doctest::Approx(ref).epsilon(1e-12));
  }
  QuietWarnings qw;
  CHECK(sim(Tensor::zeros({2, 2}), rand_map(2, 2, rng)) == 0.0);
  CHECK_THROWS(kl_div(rand_map(2, 2, rng), Tensor::zeros({2, 2})));
}

TEST_CASE("pgm and fixation io") {
  const fs::path dir = fs::temp_directory_path() / "diffsal_metrics_io";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(5);
  const Tensor m = rand_map(5, 7, rng);
  for (int bits : {8, 16}) {
    const std::string p = (dir / ("m" + std::to_string(bits) + ".pgm")).string();
    write_pgm(p, m, bits);
    const Tensor r = read_pgm(p);
    REQUIRE(r.shape() == Shape{5, 7});
    const double tol = 0.5 / (bits == 8 ? 255.0 : 65535.0) + 1e-15;
    for (int64_t i = 0; i < m.numel(); ++i) CHECK(std::abs(r.data()[i] - m.data()[i]) <= tol);
  }
  const FixationSet f{{0, 1}, {4, 6}, {2, 3}};
  write_fixations((dir / "f.fix").string(), f);
  CHECK(read_fixations((dir / "f.fix").string()) == f);
  CHECK_THROWS(read_pgm((dir / "nope.pgm").string()));
  fs::remove_all(dir);
}

TEST_CASE("evaluate") {
  const fs::path root = fs::temp_directory_path() / "diffsal_eval";
  fs::remove_all(root);
  fs::create_directories(root / "gt");
  fs::create_directories(root / "pred");
  fs::create_directories(root / "empty");
  Rng rng(6);
  for (int i = 0; i < 4; ++i) {
    const std::string id = "s" + std::to_string(i);
    const Tensor g = rand_map(6, 8, rng);
    write_pgm((root / "gt" / (id + ".pgm")).string(), g, 16);
    write_pgm((root / "pred" / (id + ".pgm")).string(), rand_map(6, 8, rng), 16);
    write_fixations((root / "gt" / (id + ".fix")).string(), rand_fix(6, 8, 5, rng));
  }
  SUBCASE("identical directories") {
    const auto t = evaluate((root / "gt").string(), (root / "gt").string());
    REQUIRE(t.rows.size() == 4);
    for (const auto& r : t.rows) {
      CHECK(r.cc == doctest::Approx(1.0));
      CHECK(r.sim == doctest::Approx(1.0));
    }
  }
  SUBCASE("means are row averages") {
    const auto t = evaluate((root / "pred").string(), (root / "gt").string(), 2);
    double cc_sum = 0, kl_sum = 0, auc_sum = 0;
    for (const auto& r : t.rows) cc_sum += r.cc, kl_sum += r.kl, auc_sum += r.aucj;
    CHECK(std::abs(t.mean.cc - cc_sum / 4) < 1e-12);
    CHECK(std::abs(t.mean.kl - kl_sum / 4) < 1e-12);
    CHECK(std::abs(t.mean.aucj - auc_sum / 4) < 1e-12);
    CHECK(t.csv().rfind("sample,cc,nss,aucj,sim,kl\n", 0) == 0);
    CHECK(t.text().find("AUC-J") != std::string::npos);
    // Parallel and serial evaluation agree exactly.
    const auto s = evaluate((root / "pred").string(), (root / "gt").string(), 1);
    CHECK(s.csv() == t.csv());
  }
  SUBCASE("empty directory names the path") {
    try {
      evaluate((root / "pred").string(), (root / "empty").string());
      FAIL("expected throw");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("empty") != std::string::npos);
    }
  }
  fs::remove_all(root);
}
