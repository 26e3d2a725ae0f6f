#pragma once

#include <functional>
#include <string>
#include <vector>

#include "diffsal/tensor.hpp"

namespace diffsal::metrics {

struct Fixation {
  int64_t row = 0;
  int64_t col = 0;
  bool operator==(const Fixation&) const = default;
};
using FixationSet = std::vector<Fixation>;

// Maps are [H, W] or [H, W, 1]. Degenerate inputs (constant maps, zero
// mass) produce the documented fallback value and a call to the warning
// handler, which writes to stderr by default.
using WarningHandler = std::function<void(const std::string&)>;
WarningHandler set_warning_handler(WarningHandler handler);

inline constexpr double kKlEps = 1e-8;

double cc(const Tensor& p, const Tensor& q);
double nss(const Tensor& p, const FixationSet& fix);
// ROC area with fixated pixels as positives and every other pixel as a
// negative. Thresholds sweep every distinct map value, so ties get half
// credit and the result equals the pairwise-comparison probability.
double auc_judd(const Tensor& p, const FixationSet& fix);
double sim(const Tensor& p, const Tensor& q);
// sum Q log(Q / (P + eps)) over sum-normalized maps, Q the ground truth.
double kl_div(const Tensor& p, const Tensor& q);

struct MetricRow {
  std::string sample;
  double cc = 0, nss = 0, aucj = 0, sim = 0, kl = 0;
};

MetricRow score(const std::string& name, const Tensor& pred, const Tensor& gt, const FixationSet& fix);

struct MetricTable {
  std::vector<MetricRow> rows;
  MetricRow mean;
  std::string csv() const;   // header sample,cc,nss,aucj,sim,kl; final row "mean"
  std::string text() const;  // aligned columns
};

MetricTable tabulate(std::vector<MetricRow> rows);

struct EvalItem {
  std::string name;
  std::string pred_path;
  std::string gt_path;
  std::string fix_path;
};

MetricTable evaluate(const std::vector<EvalItem>& items, int jobs = 1);
// Ground-truth directory holds <id>.pgm with fixations in <id>.fix; the
// prediction directory must contain a matching <id>.pgm for each.
MetricTable evaluate(const std::string& pred_dir, const std::string& gt_dir, int jobs = 1);

// Binary PGM (P5), 8- or 16-bit. Values are read into [0, 1].
Tensor read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Tensor& map01, int bits = 8);

// One `row col` pair per line.
FixationSet read_fixations(const std::string& path);
void write_fixations(const std::string& path, const FixationSet& fix);

}  // namespace diffsal::metrics
