#include "diffsal/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "diffsal/rng.hpp"
#include "diffsal/serialize.hpp"

namespace diffsal::synth {

namespace fs = std::filesystem;

Trajectory parse_trajectory(const std::string& s) {
  if (s == "linear") return Trajectory::kLinear;
  if (s == "circular") return Trajectory::kCircular;
  if (s == "random-walk" || s == "random_walk") return Trajectory::kRandomWalk;
  throw std::invalid_argument("unknown trajectory '" + s + "' (expected linear, circular, random-walk)");
}

std::string to_string(Trajectory t) {
  switch (t) {
    case Trajectory::kLinear: return "linear";
    case Trajectory::kCircular: return "circular";
    case Trajectory::kRandomWalk: return "random-walk";
  }
  return "?";
}

namespace {

double object_sigma(const SceneConfig& c) {
  return c.object_sigma_frac * static_cast<double>(std::min(c.height, c.width));
}

// Keeps the whole blob (3 sigma) inside the frame.
double margin(const SceneConfig& c) { return 3.0 * object_sigma(c); }

double reflect(double x, double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0) return lo;
  double u = std::fmod(x - lo, 2.0 * span);
  if (u < 0) u += 2.0 * span;
  return lo + (u <= span ? u : 2.0 * span - u);
}

constexpr std::array<std::array<double, 3>, 6> kPalette{{
    {0.95, 0.25, 0.2}, {0.2, 0.85, 0.3}, {0.25, 0.4, 0.95}, {0.95, 0.85, 0.2}, {0.85, 0.3, 0.9}, {0.2, 0.9, 0.9}}};
constexpr std::array<double, 5> kTones{330.0, 440.0, 550.0, 660.0, 880.0};

Track make_track(const SceneConfig& c, Trajectory kind, double speed, Rng& rng) {
  const double m = margin(c);
  const double rlo = m, rhi = static_cast<double>(c.height - 1) - m;
  const double clo = m, chi = static_cast<double>(c.width - 1) - m;
  Track t;
  t.positions.resize(c.frames);
  if (kind == Trajectory::kCircular) {
    const double max_r = std::max(0.5, std::min(rhi - rlo, chi - clo) / 2.0);
    const double radius = rng.uniform(0.5 * max_r, max_r);
    const Point center{rng.uniform(rlo + radius, rhi - radius), rng.uniform(clo + radius, chi - radius)};
    const double omega = speed / radius * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int64_t f = 0; f < c.frames; ++f) {
      const double a = phase + omega * static_cast<double>(f);
      t.positions[f] = {center.row + radius * std::sin(a), center.col + radius * std::cos(a)};
    }
    return t;
  }
  Point p{rng.uniform(rlo, rhi), rng.uniform(clo, chi)};
  double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
  if (kind == Trajectory::kLinear) {
    for (int64_t f = 0; f < c.frames; ++f) {
      const double s = speed * static_cast<double>(f);
      t.positions[f] = {reflect(p.row + s * std::sin(heading), rlo, rhi), reflect(p.col + s * std::cos(heading), clo, chi)};
    }
    return t;
  }
  // Random walk: constant step length, heading drifts each frame.
  for (int64_t f = 0; f < c.frames; ++f) {
    t.positions[f] = p;
    heading += 0.5 * rng.normal();
    p.row = reflect(p.row + speed * std::sin(heading), rlo, rhi);
    p.col = reflect(p.col + speed * std::cos(heading), clo, chi);
  }
  return t;
}

}  // namespace

void SceneConfig::validate() const {
  if (frames < 1 || height < 2 || width < 2) throw std::invalid_argument("scene needs frames >= 1 and size >= 2x2");
  if (min_objects < 1 || max_objects < min_objects) throw std::invalid_argument("invalid object count range");
  if (speed_min < 0 || speed_max < speed_min) throw std::invalid_argument("invalid speed range");
  if (fixations < 1) throw std::invalid_argument("need at least one fixation");
  if (sample_rate < 1 || duration_s <= 0) throw std::invalid_argument("invalid audio rate or duration");
  const double m = margin(*this);
  if (2.0 * m >= static_cast<double>(std::min(height, width) - 1)) {
    throw std::invalid_argument("objects (3 sigma = " + std::to_string(m) + " px) do not fit a " +
                                std::to_string(height) + "x" + std::to_string(width) + " frame");
  }
}

std::vector<double> track_speed(const Track& t) {
  const size_t n = t.positions.size();
  std::vector<double> s(n, 0.0);
  if (n < 2) return s;
  auto dist = [&](size_t a, size_t b) {
    return std::hypot(t.positions[a].row - t.positions[b].row, t.positions[a].col - t.positions[b].col);
  };
  for (size_t i = 0; i < n; ++i) {
    if (i == 0) {
      s[i] = dist(1, 0);
    } else if (i + 1 == n) {
      s[i] = dist(n - 1, n - 2);
    } else {
      s[i] = dist(i + 1, i - 1) / 2.0;
    }
  }
  return s;
}

SceneSample render(const SceneConfig& cfg, std::vector<Track> tracks, int64_t sounding, uint64_t noise_seed) {
  cfg.validate();
  if (tracks.empty() || sounding < 0 || sounding >= static_cast<int64_t>(tracks.size())) {
    throw std::invalid_argument("sounding object index out of range");
  }
  for (const auto& tr : tracks) {
    if (static_cast<int64_t>(tr.positions.size()) != cfg.frames) throw std::invalid_argument("track length != frames");
  }
  const int64_t T = cfg.frames, H = cfg.height, W = cfg.width;
  Rng noise(noise_seed, 0, "scene-noise");
  SceneSample s;
  s.sounding = sounding;

  const double sig = object_sigma(cfg);
  std::vector<double> clip(T * H * W * 3, 0.0);
  for (int64_t f = 0; f < T; ++f)
    for (const auto& tr : tracks) {
      const Point p = tr.positions[f];
      for (int64_t r = 0; r < H; ++r)
        for (int64_t c = 0; c < W; ++c) {
          const double d2 = (r - p.row) * (r - p.row) + (c - p.col) * (c - p.col);
          const double v = std::exp(-d2 / (2.0 * sig * sig));
          for (int ch = 0; ch < 3; ++ch) clip[((f * H + r) * W + c) * 3 + ch] += tr.color[ch] * v;
        }
    }
  if (cfg.noise > 0) {
    for (double& v : clip) v += cfg.noise * noise.normal();
  }
  for (double& v : clip) v = std::clamp(v, 0.0, 1.0);
  s.clip = Tensor({T, H, W, 3}, std::move(clip));

  // Tone loudness follows the sounding object's speed; distractors are silent.
  const Track& src = tracks[sounding];
  const std::vector<double> speed = track_speed(src);
  const double vref = std::max(cfg.speed_max, 1e-9);
  const int64_t n = std::llround(cfg.duration_s * cfg.sample_rate);
  s.waveform.sample_rate = cfg.sample_rate;
  s.waveform.samples.resize(n);
  for (int64_t i = 0; i < n; ++i) {
    const double tau = static_cast<double>(i) / cfg.sample_rate;
    const double u = std::clamp(tau / cfg.duration_s * static_cast<double>(T) - 0.5, 0.0, static_cast<double>(T - 1));
    const int64_t k = std::min<int64_t>(static_cast<int64_t>(u), T - 1);
    const double frac = u - static_cast<double>(k);
    const double sp = k + 1 < T ? speed[k] * (1 - frac) + speed[k + 1] * frac : speed[k];
    const double amp = 0.5 * std::clamp(sp / vref, 0.05, 1.0);
    s.waveform.samples[i] = amp * std::sin(2.0 * std::numbers::pi * src.tone_hz * tau) + 0.1 * cfg.noise * noise.normal();
  }

  const double gs = cfg.gt_sigma_frac * static_cast<double>(std::min(H, W));
  const Point g = src.positions.back();
  std::vector<double> gt(H * W);
  double mx = 0;
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      const double d2 = (r - g.row) * (r - g.row) + (c - g.col) * (c - g.col);
      gt[r * W + c] = std::exp(-d2 / (2.0 * gs * gs));
      mx = std::max(mx, gt[r * W + c]);
    }
  for (double& v : gt) v /= mx;

  std::vector<double> cdf(gt.size());
  std::partial_sum(gt.begin(), gt.end(), cdf.begin());
  for (int64_t k = 0; k < cfg.fixations; ++k) {
    const double u = noise.uniform() * cdf.back();
    const int64_t idx = std::min<int64_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(), H * W - 1);
    s.fixations.push_back({idx / W, idx % W});
  }
  s.gt = Tensor({H, W}, std::move(gt));
  s.tracks = std::move(tracks);
  return s;
}

SceneSample generate(const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed, 0, "scene");
  const int64_t n = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  std::vector<double> speeds(n);
  for (int64_t i = 0; i < n; ++i) {
    speeds[i] = n == 1 ? rng.uniform(cfg.speed_min, cfg.speed_max)
                       : cfg.speed_min + (cfg.speed_max - cfg.speed_min) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  for (int64_t i = n - 1; i > 0; --i) std::swap(speeds[i], speeds[rng.uniform_int(0, i)]);
  std::vector<int64_t> palette(kPalette.size());
  std::iota(palette.begin(), palette.end(), 0);
  for (int64_t i = static_cast<int64_t>(palette.size()) - 1; i > 0; --i) std::swap(palette[i], palette[rng.uniform_int(0, i)]);

  std::vector<Track> tracks;
  for (int64_t i = 0; i < n; ++i) {
    const Trajectory kind = cfg.mixed_trajectories ? static_cast<Trajectory>(rng.uniform_int(0, 2)) : cfg.trajectory;
    Track t = make_track(cfg, kind, speeds[i], rng);
    if (cfg.identical_objects) {
      t.color = {0.9, 0.9, 0.9};
      t.tone_hz = 440.0;
    } else {
      t.color = kPalette[palette[i % palette.size()]];
      t.tone_hz = kTones[rng.uniform_int(0, kTones.size() - 1)];
    }
    tracks.push_back(std::move(t));
  }
  int64_t sounding = rng.uniform_int(0, n - 1);
  if (cfg.flip_sounding) sounding = (sounding + 1) % n;
  return render(cfg, std::move(tracks), sounding, Rng::mix(cfg.seed ^ 0x5eedULL));
}

std::vector<ManifestEntry> make_dataset(int64_t n, const SceneConfig& base, const std::string& out_dir, int jobs) {
  if (n < 0) throw std::invalid_argument("dataset size must be non-negative");
  base.validate();
  const fs::path root(out_dir);
  for (const char* sub : {"clips", "audio", "gt", "fix"}) fs::create_directories(root / sub);
  std::vector<ManifestEntry> entries(n);
  auto work = [&](int64_t begin, int64_t stride) {
    for (int64_t i = begin; i < n; i += stride) {
      char id[32];
      std::snprintf(id, sizeof id, "%05lld", static_cast<long long>(i));
      SceneConfig cfg = base;
      const int64_t scene = base.paired_sounding ? i / 2 : i;
      cfg.seed = Rng::mix(base.seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(scene) + 1);
      if (base.paired_sounding) cfg.flip_sounding = base.flip_sounding != (i % 2 == 1);
      const SceneSample s = generate(cfg);
      ManifestEntry e{id, std::string("clips/") + id + ".dstn", std::string("audio/") + id + ".wav",
                      std::string("gt/") + id + ".pgm", std::string("fix/") + id + ".fix", cfg.seed};
      save_tensor((root / e.clip_path).string(), s.clip);
      audio::write_wav((root / e.wav_path).string(), s.waveform);
      metrics::write_pgm((root / e.gt_path).string(), s.gt, 16);
      metrics::write_fixations((root / e.fix_path).string(), s.fixations);
      entries[i] = std::move(e);
    }
  };
  const int64_t workers = std::clamp<int64_t>(jobs, 1, std::max<int64_t>(n, 1));
  std::vector<std::future<void>> futs;
  for (int64_t w = 1; w < workers; ++w) futs.push_back(std::async(std::launch::async, work, w, workers));
  work(0, workers);
  for (auto& f : futs) f.get();
  write_manifest((root / kManifestName).string(), entries);
  for (auto& e : entries) {
    e.clip_path = (root / e.clip_path).string();
    e.wav_path = (root / e.wav_path).string();
    e.gt_path = (root / e.gt_path).string();
    e.fix_path = (root / e.fix_path).string();
  }
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    out += e.id + '\t' + e.clip_path + '\t' + e.wav_path + '\t' + e.gt_path + '\t' + e.fix_path + '\t' +
           std::to_string(e.seed) + '\n';
  }
  atomic_write(path, out);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path);
  const fs::path dir = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (dir / p).string(); };
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, '\t');) f.push_back(tok);
    if (f.size() != 6) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 6 tab-separated fields, got " +
                               std::to_string(f.size()));
    }
    out.push_back({f[0], resolve(f[1]), resolve(f[2]), resolve(f[3]), resolve(f[4]), std::stoull(f[5])});
  }
  return out;
}

LoadedSample load_sample(const ManifestEntry& e) {
  LoadedSample s;
  s.id = e.id;
  s.clip = load_tensor(e.clip_path);
  if (s.clip.dim() != 4 || s.clip.size(3) != 3) throw ShapeError(e.clip_path + ": clip must be [T, H, W, 3]");
  s.waveform = audio::read_wav(e.wav_path);
  s.gt = metrics::read_pgm(e.gt_path);
  s.fixations = metrics::read_fixations(e.fix_path);
  if (s.gt.size(0) != s.clip.size(1) || s.gt.size(1) != s.clip.size(2)) {
    throw ShapeError(e.id + ": ground truth size differs from the clip frames");
  }
  return s;
}

}  // namespace diffsal::synth
