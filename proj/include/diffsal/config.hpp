#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffsal/audio.hpp"
#include "diffsal/synth.hpp"
#include "diffsal/training.hpp"
#include "diffsal/unet.hpp"

namespace diffsal {

struct AblateConfig {
  std::vector<unet::Fusion> fusions{unet::Fusion::kMim, unet::Fusion::kBilinear, unet::Fusion::kAddition,
                                    unet::Fusion::kConcatenation};
  std::vector<unet::Attention> attentions{unet::Attention::kEca, unet::Attention::kSca};
  std::vector<training::Loss> losses{training::Loss::kMse, training::Loss::kKl, training::Loss::kCe};
  std::vector<unet::Mode> modes{unet::Mode::kAudioVisual, unet::Mode::kVideoOnly, unet::Mode::kAudioOnly};
  std::vector<int64_t> steps{1, 2, 4};
  int64_t train_steps = 200;  // optimizer steps per trained cell
};

// Flat `key = value` configuration shared by every command. Values are
// parsed and range-checked on assignment; validate() checks the
// cross-field constraints.
struct RunConfig {
  uint64_t seed = 0;
  int jobs = 1;
  std::string out = "out";
  int64_t dataset_size = 8;
  synth::SceneConfig scene;
  audio::AudioConfig audio;
  unet::ModelConfig model;  // spatial and audio extents are derived, see model_config()
  training::TrainConfig train;
  int64_t sample_steps = 4;
  AblateConfig ablate;

  // Throws std::invalid_argument naming the key for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  // Lines `key = value`; `#` starts a comment; blank lines are ignored.
  void load_file(const std::string& path);
  void load_text(const std::string& text, const std::string& origin = "<text>");
  std::string dump() const;  // every key, loadable by load_text

  void validate() const;
  // Model config with extents taken from the scene and audio settings.
  unet::ModelConfig model_config() const;
};

}  // namespace diffsal
