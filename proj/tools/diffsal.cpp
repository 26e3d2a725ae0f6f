#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "diffsal/commands.hpp"

using namespace diffsal;

namespace {

const std::vector<std::string> kModes{"av", "video_only", "audio_only"};
const std::vector<std::string> kFusions{"mim", "bilinear", "addition", "concatenation"};
const std::vector<std::string> kAttentions{"eca", "sca"};
const std::vector<std::string> kLosses{"mse", "kl", "ce"};

struct Flags {
  std::string config;
  std::optional<uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> out;
  std::vector<std::string> overrides;

  std::string data, checkpoint, pred;
  std::optional<std::string> mode, fusion, attention, loss;
  std::optional<int64_t> steps, epochs, max_steps, batch_size, n;
  std::optional<double> lr;
};

// Defaults, then the config file, then --set, then dedicated flags.
RunConfig resolve(const Flags& f) {
  RunConfig cfg;
  if (!f.config.empty()) cfg.load_file(f.config);
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) cfg.set("seed", std::to_string(*f.seed));
  if (f.jobs) cfg.set("jobs", std::to_string(*f.jobs));
  if (f.out) cfg.set("out", *f.out);
  if (f.mode) cfg.set("model.mode", *f.mode);
  if (f.fusion) cfg.set("model.fusion", *f.fusion);
  if (f.attention) cfg.set("model.attention", *f.attention);
  if (f.loss) cfg.set("train.loss", *f.loss);
  if (f.steps) cfg.set("diffusion.steps", std::to_string(*f.steps));
  if (f.epochs) cfg.set("train.epochs", std::to_string(*f.epochs));
  if (f.max_steps) cfg.set("train.max_steps", std::to_string(*f.max_steps));
  if (f.batch_size) cfg.set("train.batch_size", std::to_string(*f.batch_size));
  if (f.n) cfg.set("synth.n", std::to_string(*f.n));
  if (f.lr) {
    std::ostringstream os;
    os.precision(17);
    os << *f.lr;
    cfg.set("train.lr", os.str());
  }
  cfg.validate();
  return cfg;
}

constexpr const char* kUsage =
    "Usage: diffsal [--config PATH] [--seed N] [--jobs N] [--out DIR] [--set KEY=VALUE]... "
    "synth|train|sample|eval|ablate [OPTIONS]\n\n";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-visual saliency prediction with a conditional diffusion model", "diffsal"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "Flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "Seed for every random stream");
  app.add_option("--jobs", f.jobs, "Worker threads")->check(CLI::Range(1, 1024));
  app.add_option("--out", f.out, "Output directory");
  app.add_option("--set", f.overrides, "Config override KEY=VALUE (repeatable)");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic audio-visual dataset");
  synth->add_option("--n", f.n, "Number of samples")->check(CLI::NonNegativeNumber);

  auto* train = app.add_subcommand("train", "Train a model on a dataset");
  train->add_option("--data", f.data, "Dataset directory or manifest")->required();
  train->add_option("--mode", f.mode, "Modality")->check(CLI::IsMember(kModes));
  train->add_option("--fusion", f.fusion, "Audio-visual fusion")->check(CLI::IsMember(kFusions));
  train->add_option("--attention", f.attention, "Cross-attention variant")->check(CLI::IsMember(kAttentions));
  train->add_option("--loss", f.loss, "Training loss")->check(CLI::IsMember(kLosses));
  train->add_option("--epochs", f.epochs, "Epochs")->check(CLI::PositiveNumber);
  train->add_option("--max-steps", f.max_steps, "Stop after this many optimizer steps (0: no limit)")
      ->check(CLI::NonNegativeNumber);
  train->add_option("--batch-size", f.batch_size, "Samples per optimizer step")->check(CLI::PositiveNumber);
  train->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::PositiveNumber);

  auto* sample = app.add_subcommand("sample", "Predict saliency maps with a trained model");
  sample->add_option("--checkpoint", f.checkpoint, "Checkpoint written by train")->required()->check(CLI::ExistingFile);
  sample->add_option("--data", f.data, "Dataset directory or manifest")->required();
  sample->add_option("--steps", f.steps, "DDIM denoising steps")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Score predicted maps against ground truth");
  eval->add_option("--pred", f.pred, "Directory of predicted <id>.pgm maps")->required();
  eval->add_option("--data", f.data, "Ground-truth dataset directory or manifest")->required();

  auto* ablate = app.add_subcommand("ablate", "Train and score the ablation grid");
  ablate->add_option("--data", f.data, "Dataset directory or manifest")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << kUsage << app.help();
    return 2;
  }

  CLI::App* cmd = app.get_subcommands().front();
  RunConfig cfg;
  try {
    cfg = resolve(f);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n\n" << kUsage << cmd->help();
    return 2;
  }

  try {
    if (cmd == synth) {
      const auto entries = cli::cmd_synth(cfg);
      std::cout << "wrote " << entries.size() << " samples to " << cfg.out << "\n";
    } else if (cmd == train) {
      const auto r = cli::cmd_train(cfg, f.data);
      std::cout << "trained " << r.log.size() << " steps over " << r.epochs_run << " epochs, final loss "
                << (r.log.empty() ? 0.0 : r.log.back().loss) << "; checkpoint in " << cfg.out << "\n";
    } else if (cmd == sample) {
      const auto written = cli::cmd_sample(cfg, f.checkpoint, f.data);
      std::cout << "wrote " << written.size() << " maps to " << cfg.out << "\n";
    } else if (cmd == eval) {
      std::cout << cli::cmd_eval(cfg, f.pred, f.data).text();
    } else if (cmd == ablate) {
      std::cout << cli::cmd_ablate(cfg, f.data).text;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
