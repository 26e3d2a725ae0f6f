#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "diffsal/audio.hpp"
#include "diffsal/diffusion.hpp"
#include "diffsal/nn.hpp"
#include "diffsal/synth.hpp"
#include "diffsal/unet.hpp"

namespace diffsal::training {

enum class Loss { kMse, kKl, kCe };
Loss parse_loss(const std::string& s);
std::string to_string(Loss l);

// Mean squared difference.
Tensor mse_loss(const Tensor& pred, const Tensor& target);
// Both maps shifted to be non-negative, normalized to sum 1 and floored at
// kProbFloor; sum target * log(target / pred).
Tensor kl_loss(const Tensor& pred_map, const Tensor& target_map);
// Mean binary cross entropy of sigmoid(logits) against targets in [0, 1].
Tensor ce_loss(const Tensor& logits, const Tensor& target);
inline constexpr double kProbFloor = 1e-8;

// Loss between a predicted signal in [-1, 1] and the clean signal. MSE works
// in signal space; KL and CE on the maps mapped back to [0, 1].
Tensor signal_loss(Loss kind, const Tensor& pred_signal, const Tensor& target_signal);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  int64_t step = 0;
};

// One bias-corrected Adam update from the parameters' accumulated grads. A
// parameter without grad is treated as having zero grad.
void adam_step(const nn::ParamList& params, AdamState& state, const AdamConfig& cfg);

// Scales grads so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(const nn::ParamList& params, double max_norm);
void zero_grad(const nn::ParamList& params);

struct TrainItem {
  std::string id;
  Tensor clip;    // [T, H, W, 3]
  Tensor slices;  // [T_a, H_a, W_a, 1]
  Tensor gt;      // [H, W] in [0, 1]
  metrics::FixationSet fixations;
};

TrainItem make_item(const std::string& id, const Tensor& clip, const audio::Waveform& w, const Tensor& gt,
                    metrics::FixationSet fixations, const audio::AudioConfig& acfg);
std::vector<TrainItem> load_dataset(const std::string& manifest_path, const audio::AudioConfig& acfg, int jobs = 1);
// The model config matching a dataset's clip and slice shapes.
unet::ModelConfig fit_model_config(unet::ModelConfig base, const TrainItem& item);

struct TrainConfig {
  double learning_rate = 1e-4;
  int64_t batch_size = 4;
  int64_t epochs = 5;
  int64_t max_steps = 0;  // 0: no limit beyond epochs
  int64_t T = 1000;
  Loss loss = Loss::kMse;
  uint64_t seed = 0;
  double clip_norm = 1.0;
  bool train_encoders = true;  // false freezes both encoders and caches their features
  std::string log_path;        // step,loss,lr,wallclock_ms per line; empty disables
  std::string checkpoint_path; // rewritten after every epoch; empty disables

  void validate() const;
};

struct StepRecord {
  int64_t step = 0;
  double loss = 0;
  double lr = 0;
  double wallclock_ms = 0;
};

struct TrainResult {
  std::vector<StepRecord> log;
  std::vector<int64_t> timesteps;  // every t drawn, in order
  int64_t epochs_run = 0;
};

TrainResult train_loop(const std::vector<TrainItem>& data, unet::Model& model, const TrainConfig& cfg,
                       const std::function<void(const StepRecord&)>& on_step = {});

void save_model(const std::string& path, const unet::Model& model);
void load_model(const std::string& path, unet::Model& model);

// DDIM sample for one item; returns an [H, W] map in [0, 1].
Tensor predict(const unet::Model& model, const TrainItem& item, int64_t steps, const diffusion::NoiseSchedule& sched,
               uint64_t seed);

}  // namespace diffsal::training
