#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "diffsal/rng.hpp"
#include "diffsal/tensor.hpp"

namespace diffsal::diffusion {

struct NoiseSchedule {
  int64_t T = 0;
  std::vector<double> alpha_bar;  // length T + 1, alpha_bar[0] == 1

  // t == -1 denotes the clean endpoint and maps to 1.
  double ab(int64_t t) const;
  double sqrt_ab(int64_t t) const;
  double sqrt_one_minus(int64_t t) const;
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

// Normalized squared-cosine schedule; per-step beta clipped at max_beta.
NoiseSchedule cosine_schedule(int64_t T, double s = kCosineOffset, double max_beta = kMaxBeta);

// sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, for 1 <= t <= T.
Tensor q_sample(const Tensor& x0, int64_t t, const Tensor& eps, const NoiseSchedule& sched);

// Deterministic when sigma == 0 (eps may be undefined then). t_next == -1
// returns x0_pred.
Tensor ddim_step(const Tensor& x_t, const Tensor& x0_pred, int64_t t_now, int64_t t_next, double sigma,
                 const Tensor& eps, const NoiseSchedule& sched);

struct StepPlan {
  std::vector<std::pair<int64_t, int64_t>> pairs;  // (t_now, t_next), descending, ends at -1
};

// Reversed linspace(-1, T, steps + 1), rounded to the nearest integer and
// deduplicated, zipped into consecutive pairs.
StepPlan make_step_plan(int64_t steps, int64_t T);

// [0,1] maps <-> [-1,1] diffusion signal.
Tensor to_signal(const Tensor& map01);
Tensor from_signal(const Tensor& signal);

// x0 prediction for a noisy signal at step t; conditioning is bound by the caller.
using Denoiser = std::function<Tensor(const Tensor& x_t, int64_t t)>;

// DDIM sampling with sigma = 0 starting from S_T ~ N(0, I). Every
// prediction is clamped to [-1, 1]; the result is mapped back to [0, 1].
Tensor sample(const Denoiser& model, const Shape& shape, int64_t steps, const NoiseSchedule& sched, Rng& rng);

}  // namespace diffsal::diffusion
