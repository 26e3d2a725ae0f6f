#include "diffsal/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "diffsal/serialize.hpp"

namespace diffsal::training {

Loss parse_loss(const std::string& s) {
  if (s == "mse") return Loss::kMse;
  if (s == "kl") return Loss::kKl;
  if (s == "ce") return Loss::kCe;
  throw std::invalid_argument("unknown loss '" + s + "' (expected mse, kl, ce)");
}

std::string to_string(Loss l) {
  switch (l) {
    case Loss::kMse: return "mse";
    case Loss::kKl: return "kl";
    case Loss::kCe: return "ce";
  }
  return "?";
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + " shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Non-negative, sum-one, floored. The shift is treated as a constant.
Tensor to_distribution(const Tensor& x) {
  double lo = 0.0;
  for (double v : x.data()) lo = std::min(lo, v);
  const Tensor shifted = lo < 0.0 ? add_scalar(x, -lo) : x;
  return clamp(div(shifted, sum_all(shifted)), kProbFloor, INFINITY);
}

}  // namespace

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse_loss");
  return mean_all(square(sub(pred, target)));
}

Tensor kl_loss(const Tensor& pred_map, const Tensor& target_map) {
  require_same_shape(pred_map, target_map, "kl_loss");
  const Tensor p = to_distribution(pred_map);
  const Tensor q = to_distribution(target_map).detach();
  return sum_all(mul(q, sub(log(q), log(p))));
}

Tensor ce_loss(const Tensor& logits, const Tensor& target) {
  require_same_shape(logits, target, "ce_loss");
  // softplus(l) - t l, with softplus(l) = relu(l) + log(1 + exp(-|l|))
  const Tensor abs_l = add(relu(logits), relu(neg(logits)));
  const Tensor softplus = add(relu(logits), log(add_scalar(exp(neg(abs_l)), 1.0)));
  return mean_all(sub(softplus, mul(target, logits)));
}

Tensor signal_loss(Loss kind, const Tensor& pred_signal, const Tensor& target_signal) {
  switch (kind) {
    case Loss::kMse: return mse_loss(pred_signal, target_signal);
    case Loss::kKl: return kl_loss(diffusion::from_signal(pred_signal), diffusion::from_signal(target_signal));
    case Loss::kCe: {
      constexpr double kEdge = 1e-7;
      const Tensor p = clamp(diffusion::from_signal(pred_signal), kEdge, 1.0 - kEdge);
      const Tensor logits = sub(log(p), log(add_scalar(neg(p), 1.0)));
      return ce_loss(logits, diffusion::from_signal(target_signal).detach());
    }
  }
  throw std::logic_error("unhandled loss");
}

void adam_step(const nn::ParamList& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::logic_error("Adam state does not match parameter list");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (static_cast<int64_t>(m.size()) != t.numel()) throw std::logic_error("Adam moment shape mismatch");
    const bool has = t.has_grad();
    const auto g = t.grad();
    auto w = t.mutable_data();
    for (int64_t j = 0; j < t.numel(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      w[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

double clip_grad_norm(const nn::ParamList& params, double max_norm) {
  double ss = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) ss += g * g;
  const double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (const auto& p : params) {
      auto& g = p.tensor.impl()->grad;
      for (double& x : g) x *= f;
    }
  }
  return norm;
}

void zero_grad(const nn::ParamList& params) {
  for (const auto& p : params) p.tensor.impl()->grad.clear();
}

TrainItem make_item(const std::string& id, const Tensor& clip, const audio::Waveform& w, const Tensor& gt,
                    metrics::FixationSet fixations, const audio::AudioConfig& acfg) {
  TrainItem item;
  item.id = id;
  item.clip = clip;
  item.slices = audio::frontend(w, acfg).slices;
  item.gt = gt;
  item.fixations = std::move(fixations);
  return item;
}

std::vector<TrainItem> load_dataset(const std::string& manifest_path, const audio::AudioConfig& acfg, int jobs) {
  const auto entries = synth::read_manifest(manifest_path);
  std::vector<TrainItem> items(entries.size());
  const int n_jobs = std::max(1, std::min<int>(jobs, static_cast<int>(entries.size())));
  std::vector<std::future<void>> futs;
  for (int j = 0; j < n_jobs; ++j) {
    futs.push_back(std::async(std::launch::async, [&, j] {
      for (size_t i = j; i < entries.size(); i += n_jobs) {
        synth::LoadedSample s = synth::load_sample(entries[i]);
        items[i] = make_item(s.id, s.clip, s.waveform, s.gt, std::move(s.fixations), acfg);
      }
    }));
  }
  for (auto& f : futs) f.get();
  return items;
}

unet::ModelConfig fit_model_config(unet::ModelConfig base, const TrainItem& item) {
  base.frames = item.clip.size(0);
  base.height = item.clip.size(1);
  base.width = item.clip.size(2);
  base.audio_slices = item.slices.size(0);
  base.audio_height = item.slices.size(1);
  base.audio_width = item.slices.size(2);
  return base;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("train.lr must be positive");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be positive");
  if (epochs < 1) throw std::invalid_argument("train.epochs must be positive");
  if (max_steps < 0) throw std::invalid_argument("train.max_steps must be non-negative");
  if (T < 1) throw std::invalid_argument("diffusion.T must be positive");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("train.clip_norm must be positive");
}

TrainResult train_loop(const std::vector<TrainItem>& data, unet::Model& model, const TrainConfig& cfg,
                       const std::function<void(const StepRecord&)>& on_step) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("training dataset is empty");
  const unet::ModelConfig& mc = model.config();
  for (const auto& item : data) {
    if (item.gt.shape() != Shape{mc.height, mc.width}) {
      throw ShapeError("sample " + item.id + " has ground truth " + shape_str(item.gt.shape()) +
                       ", model expects " + std::to_string(mc.height) + "x" + std::to_string(mc.width));
    }
  }
  const diffusion::NoiseSchedule sched = diffusion::cosine_schedule(cfg.T);
  const nn::ParamList params = cfg.train_encoders ? model.params() : model.unet().params();
  std::vector<unet::Conditioning> cached;
  if (!cfg.train_encoders) {
    NoGradGuard ng;
    for (const auto& item : data) cached.push_back(model.condition(item.clip, item.slices));
  }
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) throw std::runtime_error("cannot open training log " + cfg.log_path);
  }
  AdamConfig acfg;
  acfg.lr = cfg.learning_rate;
  AdamState state;
  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  const int64_t n = static_cast<int64_t>(data.size());
  int64_t step = 0;
  bool done = false;
  for (int64_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(cfg.seed, static_cast<uint64_t>(epoch), "shuffle");
    for (int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle.uniform_int(0, i)]);
    for (int64_t b0 = 0; b0 < n && !done; b0 += cfg.batch_size) {
      ++step;
      const int64_t b1 = std::min(n, b0 + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(b1 - b0);
      zero_grad(params);
      double batch_loss = 0.0;
      for (int64_t j = b0; j < b1; ++j) {
        const TrainItem& item = data[order[j]];
        Rng r(cfg.seed, static_cast<uint64_t>(step), "sample");
        r = r.split(static_cast<uint64_t>(j - b0));
        const int64_t t = r.uniform_int(1, cfg.T);
        result.timesteps.push_back(t);
        const Tensor s0 = diffusion::to_signal(reshape(item.gt, {mc.height, mc.width, 1}));
        const Tensor s_t = diffusion::q_sample(s0, t, Tensor::randn(s0.shape(), r), sched);
        const unet::Conditioning cond =
            cfg.train_encoders ? model.condition(item.clip, item.slices) : cached[order[j]];
        const Tensor loss = signal_loss(cfg.loss, model.denoise(s_t, t, cond), s0);
        const double lv = loss.item();
        if (!std::isfinite(lv)) {
          std::ostringstream os;
          os << "non-finite loss " << lv << " at step " << step << " (sample " << item.id << ", t=" << t << ")";
          throw std::runtime_error(os.str());
        }
        scale(loss, inv_b).backward();
        batch_loss += lv * inv_b;
      }
      clip_grad_norm(params, cfg.clip_norm);
      adam_step(params, state, acfg);
      StepRecord rec;
      rec.step = step;
      rec.loss = batch_loss;
      rec.lr = cfg.learning_rate;
      rec.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back(rec);
      if (log) log << rec.step << ',' << rec.loss << ',' << rec.lr << ',' << rec.wallclock_ms << '\n' << std::flush;
      if (on_step) on_step(rec);
      if (cfg.max_steps > 0 && step >= cfg.max_steps) done = true;
    }
    ++result.epochs_run;
    if (!cfg.checkpoint_path.empty()) save_model(cfg.checkpoint_path, model);
  }
  zero_grad(params);
  return result;
}

void save_model(const std::string& path, const unet::Model& model) { save_checkpoint(path, nn::to_dict(model.params())); }

void load_model(const std::string& path, unet::Model& model) { nn::load_into(model.params(), load_checkpoint(path)); }

Tensor predict(const unet::Model& model, const TrainItem& item, int64_t steps, const diffusion::NoiseSchedule& sched,
               uint64_t seed) {
  NoGradGuard ng;
  const unet::Conditioning cond = model.condition(item.clip, item.slices);
  const diffusion::Denoiser d = [&](const Tensor& x, int64_t t) { return model.denoise(x, t, cond); };
  Rng rng(seed, 0, "sample");
  const Shape shape{model.config().height, model.config().width, 1};
  return reshape(diffusion::sample(d, shape, steps, sched, rng), {shape[0], shape[1]});
}

}  // namespace diffsal::training
