#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "diffsal/audio.hpp"
#include "diffsal/metrics.hpp"
#include "diffsal/tensor.hpp"

namespace diffsal::synth {

enum class Trajectory { kLinear, kCircular, kRandomWalk };
Trajectory parse_trajectory(const std::string& s);
std::string to_string(Trajectory t);

struct SceneConfig {
  int64_t frames = 16;
  int64_t height = 32;
  int64_t width = 48;
  int64_t min_objects = 2;
  int64_t max_objects = 3;
  Trajectory trajectory = Trajectory::kLinear;
  bool mixed_trajectories = false;  // draw a trajectory type per object
  bool identical_objects = false;   // same colour and tone for every object
  bool flip_sounding = false;       // sound the next object instead of the drawn one; nothing else changes
  bool paired_sounding = false;     // make_dataset: samples 2j and 2j+1 differ only in the sounding object
  // Object speeds in px/frame are spread evenly over this range and shuffled,
  // so objects in one scene move at distinct speeds.
  double speed_min = 0.4;
  double speed_max = 1.6;
  double object_sigma_frac = 0.06;  // blob radius as a fraction of min(H, W)
  double gt_sigma_frac = 0.08;
  double noise = 0.02;
  int sample_rate = 16000;
  double duration_s = 1.1;
  int64_t fixations = 20;
  uint64_t seed = 0;

  void validate() const;
};

struct Point {
  double row = 0, col = 0;
};

struct Track {
  std::vector<Point> positions;  // one per frame
  std::array<double, 3> color{1, 1, 1};
  double tone_hz = 440.0;
};

struct SceneSample {
  Tensor clip;  // [T, H, W, 3] in [0, 1]
  audio::Waveform waveform;
  Tensor gt;  // [H, W], max 1
  metrics::FixationSet fixations;
  std::vector<Track> tracks;
  int64_t sounding = 0;
};

// Deterministic in cfg.seed.
SceneSample generate(const SceneConfig& cfg);

// Renders explicit tracks; used by generate and directly by tests.
SceneSample render(const SceneConfig& cfg, std::vector<Track> tracks, int64_t sounding, uint64_t noise_seed);

// Speed (px/frame) of a track at each frame, central differences inside.
std::vector<double> track_speed(const Track& t);

struct ManifestEntry {
  std::string id;
  std::string clip_path;  // relative to the manifest directory when written by make_dataset
  std::string wav_path;
  std::string gt_path;
  std::string fix_path;
  uint64_t seed = 0;
};

inline constexpr const char* kManifestName = "manifest.tsv";

// Writes n samples under out_dir (clips/*.dstn, audio/*.wav, gt/*.pgm,
// fix/*.fix) and a tab-separated manifest. Sample seeds are derived from
// (base.seed, index).
std::vector<ManifestEntry> make_dataset(int64_t n, const SceneConfig& base, const std::string& out_dir, int jobs = 1);

// Paths in the result are resolved against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

struct LoadedSample {
  std::string id;
  Tensor clip;  // [T, H, W, 3]
  audio::Waveform waveform;
  Tensor gt;  // [H, W]
  metrics::FixationSet fixations;
};

LoadedSample load_sample(const ManifestEntry& e);

}  // namespace diffsal::synth
