#pragma once

#include <string>
#include <vector>

#include "diffsal/config.hpp"
#include "diffsal/metrics.hpp"
#include "diffsal/training.hpp"

// The work behind each `diffsal` subcommand. Every function validates the
// config first and writes its outputs under cfg.out.
namespace diffsal::cli {

inline constexpr const char* kCheckpointName = "model.dstn";
inline constexpr const char* kRunConfigName = "config.txt";
inline constexpr const char* kTrainLogName = "train_log.csv";
inline constexpr const char* kMetricsName = "metrics.csv";
inline constexpr const char* kAblationCsvName = "ablation.csv";
inline constexpr const char* kAblationTextName = "ablation.txt";

// Accepts a dataset directory or a manifest path.
std::string manifest_path(const std::string& data);

std::vector<synth::ManifestEntry> cmd_synth(const RunConfig& cfg);

// Writes model.dstn (rewritten each epoch), train_log.csv and config.txt,
// the resolved configuration that cmd_sample reloads.
training::TrainResult cmd_train(const RunConfig& cfg, const std::string& data);

// Writes <id>.pgm (16-bit) per dataset sample. The architecture comes from
// the config.txt next to the checkpoint; steps and seed come from cfg.
std::vector<std::string> cmd_sample(const RunConfig& cfg, const std::string& checkpoint, const std::string& data);

// Scores <pred_dir>/<id>.pgm against the manifest's ground truth and writes
// metrics.csv.
metrics::MetricTable cmd_eval(const RunConfig& cfg, const std::string& pred_dir, const std::string& data);

struct AblationRow {
  unet::Fusion fusion;
  unet::Attention attention;
  training::Loss loss;
  unet::Mode mode;
  int64_t steps = 0;
  metrics::MetricRow metrics;  // mean over the dataset
  double final_loss = 0;       // training loss averaged over the last 10 steps
};

struct AblationReport {
  std::vector<AblationRow> rows;
  bool loss_ranking_observed = false;  // mean CC of mse >= kl >= ce
  std::string csv;
  std::string text;
};

// Trains one model per (fusion, attention, loss, mode) cell of cfg.ablate
// and scores it on the training set for every sampling step count.
AblationReport cmd_ablate(const RunConfig& cfg, const std::string& data);

}  // namespace diffsal::cli
