#include "diffsal/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "diffsal/ops.hpp"

namespace diffsal::diffusion {

double NoiseSchedule::ab(int64_t t) const {
  if (t == -1) return 1.0;
  if (t < 0 || t > T) throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [0, " +
                                              std::to_string(T) + "]");
  return alpha_bar[t];
}

double NoiseSchedule::sqrt_ab(int64_t t) const { return std::sqrt(ab(t)); }
double NoiseSchedule::sqrt_one_minus(int64_t t) const { return std::sqrt(1.0 - ab(t)); }

NoiseSchedule cosine_schedule(int64_t T, double s, double max_beta) {
  if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
  auto f = [&](int64_t t) {
    const double c = std::cos((static_cast<double>(t) / static_cast<double>(T) + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  NoiseSchedule sched;
  sched.T = T;
  sched.alpha_bar.resize(T + 1);
  const double f0 = f(0);
  sched.alpha_bar[0] = 1.0;
  for (int64_t t = 1; t <= T; ++t) {
    // Use the closed form until the beta clip engages, then continue the product.
    const double closed = f(t) / f0;
    const double prev = sched.alpha_bar[t - 1];
    sched.alpha_bar[t] = 1.0 - closed / prev > max_beta ? prev * (1.0 - max_beta) : closed;
  }
  return sched;
}

Tensor q_sample(const Tensor& x0, int64_t t, const Tensor& eps, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) {
    throw std::out_of_range("q_sample step " + std::to_string(t) + " outside [1, " + std::to_string(sched.T) + "]");
  }
  if (x0.shape() != eps.shape()) {
    throw ShapeError("q_sample noise shape " + shape_str(eps.shape()) + " differs from signal " +
                     shape_str(x0.shape()));
  }
  return add(scale(x0, sched.sqrt_ab(t)), scale(eps, sched.sqrt_one_minus(t)));
}

Tensor ddim_step(const Tensor& x_t, const Tensor& x0_pred, int64_t t_now, int64_t t_next, double sigma,
                 const Tensor& eps, const NoiseSchedule& sched) {
  if (!(t_now > t_next && t_next >= -1)) {
    throw std::invalid_argument("ddim_step needs t_now > t_next >= -1, got " + std::to_string(t_now) + " -> " +
                                std::to_string(t_next));
  }
  if (sigma < 0.0) throw std::invalid_argument("ddim_step sigma must be non-negative");
  if (x_t.shape() != x0_pred.shape()) {
    throw ShapeError("ddim_step shapes differ: " + shape_str(x_t.shape()) + " vs " + shape_str(x0_pred.shape()));
  }
  if (t_next == -1) return x0_pred;
  const double ab_next = sched.ab(t_next);
  const double dir2 = 1.0 - ab_next - sigma * sigma;
  if (dir2 < 0.0) throw std::invalid_argument("ddim_step: sigma too large for step " + std::to_string(t_next));
  const Tensor eps_hat = scale(sub(x_t, scale(x0_pred, sched.sqrt_ab(t_now))), 1.0 / sched.sqrt_one_minus(t_now));
  Tensor out = add(scale(x0_pred, std::sqrt(ab_next)), scale(eps_hat, std::sqrt(dir2)));
  if (sigma > 0.0) {
    if (!eps.defined() || eps.shape() != x_t.shape()) throw ShapeError("ddim_step noise shape mismatch");
    out = add(out, scale(eps, sigma));
  }
  return out;
}

StepPlan make_step_plan(int64_t steps, int64_t T) {
  if (steps < 1 || steps > T) {
    throw std::invalid_argument("steps must be in [1, " + std::to_string(T) + "], got " + std::to_string(steps));
  }
  std::vector<int64_t> times;
  for (int64_t i = steps; i >= 0; --i) {
    const double v = -1.0 + static_cast<double>(T + 1) * static_cast<double>(i) / static_cast<double>(steps);
    const int64_t r = std::llround(v);
    if (times.empty() || times.back() != r) times.push_back(r);
  }
  StepPlan plan;
  for (size_t i = 0; i + 1 < times.size(); ++i) plan.pairs.emplace_back(times[i], times[i + 1]);
  return plan;
}

Tensor to_signal(const Tensor& map01) { return add_scalar(scale(map01, 2.0), -1.0); }
Tensor from_signal(const Tensor& signal) { return scale(add_scalar(signal, 1.0), 0.5); }

Tensor sample(const Denoiser& model, const Shape& shape, int64_t steps, const NoiseSchedule& sched, Rng& rng) {
  NoGradGuard no_grad;
  const StepPlan plan = make_step_plan(steps, sched.T);
  Tensor x = Tensor::randn(shape, rng);
  for (const auto& [t_now, t_next] : plan.pairs) {
    const Tensor x0 = clamp(model(x, t_now), -1.0, 1.0);
    if (x0.shape() != shape) throw ShapeError("denoiser returned " + shape_str(x0.shape()));
    x = ddim_step(x, x0, t_now, t_next, 0.0, Tensor(), sched);
  }
  return from_signal(clamp(x, -1.0, 1.0));
}

}  // namespace diffsal::diffusion
