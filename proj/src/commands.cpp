#include "diffsal/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace diffsal::cli {

namespace fs = std::filesystem;

namespace {

void parallel_for(size_t n, int jobs, const std::function<void(size_t)>& fn) {
  const size_t k = std::max<size_t>(1, std::min<size_t>(static_cast<size_t>(std::max(jobs, 1)), n));
  if (k == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::future<void>> futs;
  for (size_t j = 0; j < k; ++j) {
    futs.push_back(std::async(std::launch::async, [&, j] {
      for (size_t i = j; i < n; i += k) fn(i);
    }));
  }
  for (auto& f : futs) f.get();
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

std::vector<training::TrainItem> load_items(const RunConfig& cfg, const std::string& data) {
  auto items = training::load_dataset(manifest_path(data), cfg.audio, cfg.jobs);
  if (items.empty()) throw std::invalid_argument("dataset " + data + " has no samples");
  return items;
}

unet::ModelConfig model_for(const RunConfig& cfg, const std::vector<training::TrainItem>& items) {
  const unet::ModelConfig mc = training::fit_model_config(cfg.model, items.front());
  mc.validate();
  for (const auto& it : items) {
    if (it.clip.shape() != items.front().clip.shape() || it.slices.shape() != items.front().slices.shape()) {
      throw ShapeError("sample " + it.id + " differs in shape from " + items.front().id);
    }
  }
  return mc;
}

training::TrainConfig train_config(const RunConfig& cfg) {
  training::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  return tc;
}

metrics::MetricTable score_items(const unet::Model& model, const std::vector<training::TrainItem>& items,
                                 int64_t steps, const diffusion::NoiseSchedule& sched, uint64_t seed, int jobs) {
  std::vector<metrics::MetricRow> rows(items.size());
  parallel_for(items.size(), jobs, [&](size_t i) {
    const Tensor p = training::predict(model, items[i], steps, sched, seed);
    rows[i] = metrics::score(items[i].id, p, items[i].gt, items[i].fixations);
  });
  return metrics::tabulate(std::move(rows));
}

}  // namespace

std::string manifest_path(const std::string& data) {
  const fs::path p(data);
  if (fs::is_directory(p)) return (p / synth::kManifestName).string();
  return p.string();
}

std::vector<synth::ManifestEntry> cmd_synth(const RunConfig& cfg) {
  cfg.validate();
  synth::SceneConfig sc = cfg.scene;
  sc.seed = cfg.seed;
  return synth::make_dataset(cfg.dataset_size, sc, cfg.out, cfg.jobs);
}

training::TrainResult cmd_train(const RunConfig& cfg, const std::string& data) {
  cfg.validate();
  const auto items = load_items(cfg, data);
  const unet::ModelConfig mc = model_for(cfg, items);
  fs::create_directories(cfg.out);
  write_text(fs::path(cfg.out) / kRunConfigName, cfg.dump());
  training::TrainConfig tc = train_config(cfg);
  tc.log_path = (fs::path(cfg.out) / kTrainLogName).string();
  tc.checkpoint_path = (fs::path(cfg.out) / kCheckpointName).string();
  unet::Model model(mc, cfg.seed);
  return training::train_loop(items, model, tc);
}

std::vector<std::string> cmd_sample(const RunConfig& cfg, const std::string& checkpoint, const std::string& data) {
  cfg.validate();
  const fs::path run_cfg = fs::path(checkpoint).parent_path() / kRunConfigName;
  if (!fs::exists(run_cfg)) throw std::invalid_argument("missing " + run_cfg.string() + " next to the checkpoint");
  RunConfig trained;
  trained.load_file(run_cfg.string());
  const auto items = load_items(trained, data);
  unet::Model model(model_for(trained, items), cfg.seed);
  training::load_model(checkpoint, model);
  const auto sched = diffusion::cosine_schedule(trained.train.T);
  fs::create_directories(cfg.out);
  std::vector<std::string> written(items.size());
  parallel_for(items.size(), cfg.jobs, [&](size_t i) {
    const Tensor p = training::predict(model, items[i], cfg.sample_steps, sched, cfg.seed);
    const fs::path path = fs::path(cfg.out) / (items[i].id + ".pgm");
    metrics::write_pgm(path.string(), p, 16);
    written[i] = path.string();
  });
  return written;
}

metrics::MetricTable cmd_eval(const RunConfig& cfg, const std::string& pred_dir, const std::string& data) {
  cfg.validate();
  if (!fs::is_directory(pred_dir)) throw std::invalid_argument("prediction directory " + pred_dir + " does not exist");
  const auto entries = synth::read_manifest(manifest_path(data));
  if (entries.empty()) throw std::invalid_argument("manifest " + manifest_path(data) + " lists no samples");
  std::vector<metrics::EvalItem> items;
  for (const auto& e : entries) {
    const fs::path pred = fs::path(pred_dir) / (e.id + ".pgm");
    if (!fs::exists(pred)) throw std::invalid_argument("no prediction " + pred.string() + " for sample " + e.id);
    items.push_back({e.id, pred.string(), e.gt_path, e.fix_path});
  }
  const metrics::MetricTable table = metrics::evaluate(items, cfg.jobs);
  fs::create_directories(cfg.out);
  write_text(fs::path(cfg.out) / kMetricsName, table.csv());
  return table;
}

namespace {

std::string factor_table(const std::string& title, const std::vector<AblationRow>& rows,
                         const std::function<std::string(const AblationRow&)>& key) {
  std::map<std::string, std::pair<metrics::MetricRow, int>> acc;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    const std::string k = key(r);
    if (!acc.count(k)) order.push_back(k);
    auto& [m, n] = acc[k];
    m.cc += r.metrics.cc;
    m.nss += r.metrics.nss;
    m.aucj += r.metrics.aucj;
    m.sim += r.metrics.sim;
    m.kl += r.metrics.kl;
    ++n;
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << title << '\n' << std::left << std::setw(16) << "" << std::right;
  for (const char* h : {"CC", "NSS", "AUC-J", "SIM", "KL"}) os << std::setw(9) << h;
  os << std::setw(7) << "runs" << '\n';
  for (const auto& k : order) {
    const auto& [m, n] = acc[k];
    os << std::left << std::setw(16) << k << std::right << std::setw(9) << m.cc / n << std::setw(9) << m.nss / n
       << std::setw(9) << m.aucj / n << std::setw(9) << m.sim / n << std::setw(9) << m.kl / n << std::setw(7) << n
       << '\n';
  }
  return os.str();
}

}  // namespace

AblationReport cmd_ablate(const RunConfig& cfg, const std::string& data) {
  cfg.validate();
  const auto items = load_items(cfg, data);
  const unet::ModelConfig base = model_for(cfg, items);
  const auto sched = diffusion::cosine_schedule(cfg.train.T);
  AblationReport rep;
  int64_t cell = 0;
  for (auto fusion : cfg.ablate.fusions)
    for (auto attention : cfg.ablate.attentions)
      for (auto loss : cfg.ablate.losses)
        for (auto mode : cfg.ablate.modes) {
          unet::ModelConfig mc = base;
          mc.fusion = fusion;
          mc.attention = attention;
          mc.mode = mode;
          training::TrainConfig tc = train_config(cfg);
          tc.loss = loss;
          tc.max_steps = cfg.ablate.train_steps;
          tc.epochs = std::max<int64_t>(tc.epochs, 1 + cfg.ablate.train_steps * tc.batch_size /
                                                           static_cast<int64_t>(items.size()));
          unet::Model model(mc, cfg.seed);
          const auto result = training::train_loop(items, model, tc);
          double tail = 0;
          const size_t k = std::min<size_t>(10, result.log.size());
          for (size_t i = result.log.size() - k; i < result.log.size(); ++i) tail += result.log[i].loss / k;
          for (int64_t steps : cfg.ablate.steps) {
            const auto table = score_items(model, items, steps, sched, cfg.seed, cfg.jobs);
            rep.rows.push_back({fusion, attention, loss, mode, steps, table.mean, tail});
          }
          ++cell;
        }

  std::ostringstream csv;
  csv << std::setprecision(10) << "fusion,attention,loss,mode,steps,cc,nss,aucj,sim,kl,final_loss\n";
  for (const auto& r : rep.rows) {
    csv << unet::to_string(r.fusion) << ',' << unet::to_string(r.attention) << ',' << training::to_string(r.loss)
        << ',' << unet::to_string(r.mode) << ',' << r.steps << ',' << r.metrics.cc << ',' << r.metrics.nss << ','
        << r.metrics.aucj << ',' << r.metrics.sim << ',' << r.metrics.kl << ',' << r.final_loss << '\n';
  }
  rep.csv = csv.str();

  std::ostringstream txt;
  txt << "ablation over " << cell << " trained cells, " << rep.rows.size() << " scored rows, " << items.size()
      << " samples, " << cfg.ablate.train_steps << " steps each\n\n";
  txt << factor_table("modality", rep.rows, [](const AblationRow& r) { return unet::to_string(r.mode); }) << '\n';
  txt << factor_table("denoising steps", rep.rows, [](const AblationRow& r) { return std::to_string(r.steps); })
      << '\n';
  txt << factor_table("fusion", rep.rows, [](const AblationRow& r) { return unet::to_string(r.fusion); }) << '\n';
  txt << factor_table("cross-attention", rep.rows, [](const AblationRow& r) { return unet::to_string(r.attention); })
      << '\n';
  txt << factor_table("loss", rep.rows, [](const AblationRow& r) { return training::to_string(r.loss); }) << '\n';

  std::map<training::Loss, std::pair<double, int>> by_loss;
  for (const auto& r : rep.rows) {
    by_loss[r.loss].first += r.metrics.cc;
    ++by_loss[r.loss].second;
  }
  auto mean_cc = [&](training::Loss l) { return by_loss[l].first / by_loss[l].second; };
  const bool have_all = by_loss.count(training::Loss::kMse) && by_loss.count(training::Loss::kKl) &&
                        by_loss.count(training::Loss::kCe);
  if (have_all) {
    rep.loss_ranking_observed = mean_cc(training::Loss::kMse) >= mean_cc(training::Loss::kKl) &&
                                mean_cc(training::Loss::kKl) >= mean_cc(training::Loss::kCe);
    txt << "loss ranking mse >= kl >= ce by CC: " << (rep.loss_ranking_observed ? "observed" : "not observed") << '\n';
  } else {
    txt << "loss ranking mse >= kl >= ce by CC: not evaluated (grid lacks a loss)\n";
  }
  rep.text = txt.str();

  fs::create_directories(cfg.out);
  write_text(fs::path(cfg.out) / kAblationCsvName, rep.csv);
  write_text(fs::path(cfg.out) / kAblationTextName, rep.text);
  return rep;
}

}  // namespace diffsal::cli
