#include "diffsal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <span>
#include <sstream>

#include "diffsal/serialize.hpp"

namespace diffsal::metrics {

namespace fs = std::filesystem;

namespace {

std::mutex g_warn_mutex;
WarningHandler g_warn = [](const std::string& msg) { std::cerr << "warning: " << msg << "\n"; };

void warn(const std::string& msg) {
  std::lock_guard lock(g_warn_mutex);
  if (g_warn) g_warn(msg);
}

struct Map2 {
  int64_t h = 0, w = 0;
  std::span<const double> v;
};

Map2 as_map(const Tensor& t, const char* what) {
  const Shape& s = t.shape();
  if (!(s.size() == 2 || (s.size() == 3 && s[2] == 1))) {
    throw ShapeError(std::string(what) + " must be [H, W] or [H, W, 1], got " + shape_str(s));
  }
  if (t.numel() == 0) throw ShapeError(std::string(what) + " is empty");
  return {s[0], s[1], t.data()};
}

void same_size(const Map2& a, const Map2& b) {
  if (a.h != b.h || a.w != b.w) {
    throw ShapeError("map sizes differ: " + std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " +
                     std::to_string(b.h) + "x" + std::to_string(b.w));
  }
}

void check_fixations(const Map2& m, const FixationSet& fix) {
  if (fix.empty()) throw std::invalid_argument("fixation set is empty");
  for (const auto& f : fix) {
    if (f.row < 0 || f.row >= m.h || f.col < 0 || f.col >= m.w) {
      throw std::out_of_range("fixation (" + std::to_string(f.row) + ", " + std::to_string(f.col) +
                              ") outside a " + std::to_string(m.h) + "x" + std::to_string(m.w) + " map");
    }
  }
}

struct Moments {
  double mean = 0, sd = 0;
};

// sd is exactly 0 for constant input, regardless of rounding in the mean.
Moments moments(std::span<const double> v) {
  Moments m;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  if (*lo == *hi) {
    m.mean = *lo;
    return m;
  }
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.sd = std::sqrt(ss / static_cast<double>(v.size()));
  return m;
}

// Sum-normalized copy; empty when the mass is not positive.
std::vector<double> normalized(std::span<const double> v) {
  double s = 0;
  for (double x : v) {
    if (x < 0) throw std::invalid_argument("density map has negative entries");
    s += x;
  }
  if (!(s > 0)) return {};
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= s;
  return out;
}

}  // namespace

WarningHandler set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(g_warn_mutex);
  std::swap(g_warn, handler);
  return handler;
}

double cc(const Tensor& p, const Tensor& q) {
  const Map2 a = as_map(p, "prediction"), b = as_map(q, "ground truth");
  same_size(a, b);
  const Moments ma = moments(a.v), mb = moments(b.v);
  if (ma.sd == 0 || mb.sd == 0) {
    warn("cc: constant map, returning 0");
    return 0.0;
  }
  double cov = 0;
  for (size_t i = 0; i < a.v.size(); ++i) cov += (a.v[i] - ma.mean) * (b.v[i] - mb.mean);
  cov /= static_cast<double>(a.v.size());
  return cov / (ma.sd * mb.sd);
}

double nss(const Tensor& p, const FixationSet& fix) {
  const Map2 a = as_map(p, "prediction");
  check_fixations(a, fix);
  const Moments m = moments(a.v);
  if (m.sd == 0) {
    warn("nss: constant map, returning 0");
    return 0.0;
  }
  double s = 0;
  for (const auto& f : fix) s += (a.v[f.row * a.w + f.col] - m.mean) / m.sd;
  return s / static_cast<double>(fix.size());
}

double auc_judd(const Tensor& p, const FixationSet& fix) {
  const Map2 a = as_map(p, "prediction");
  check_fixations(a, fix);
  const int64_t n = a.h * a.w;
  std::vector<int64_t> pos_count(n, 0);
  for (const auto& f : fix) ++pos_count[f.row * a.w + f.col];
  const double n_pos = static_cast<double>(fix.size());
  int64_t neg_total = 0;
  for (int64_t i = 0; i < n; ++i) neg_total += pos_count[i] == 0;
  if (neg_total == 0) {
    warn("auc_judd: every pixel is fixated, returning 0.5");
    return 0.5;
  }
  const double n_neg = static_cast<double>(neg_total);
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) { return a.v[x] > a.v[y]; });
  // Walk thresholds from high to low; each tie group adds one ROC vertex.
  double area = 0, tp = 0, fp = 0;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    double dtp = 0, dfp = 0;
    while (j < order.size() && a.v[order[j]] == a.v[order[i]]) {
      const int64_t c = pos_count[order[j]];
      if (c > 0) {
        dtp += static_cast<double>(c);
      } else {
        dfp += 1;
      }
      ++j;
    }
    const double tp1 = tp + dtp / n_pos, fp1 = fp + dfp / n_neg;
    area += (fp1 - fp) * (tp + tp1) / 2.0;
    tp = tp1;
    fp = fp1;
    i = j;
  }
  return area;
}

double sim(const Tensor& p, const Tensor& q) {
  const Map2 a = as_map(p, "prediction"), b = as_map(q, "ground truth");
  same_size(a, b);
  const auto pa = normalized(a.v), qb = normalized(b.v);
  if (pa.empty() || qb.empty()) {
    warn("sim: map with zero mass, returning 0");
    return 0.0;
  }
  double s = 0;
  for (size_t i = 0; i < pa.size(); ++i) s += std::min(pa[i], qb[i]);
  return s;
}

double kl_div(const Tensor& p, const Tensor& q) {
  const Map2 a = as_map(p, "prediction"), b = as_map(q, "ground truth");
  same_size(a, b);
  auto pa = normalized(a.v);
  const auto qb = normalized(b.v);
  if (qb.empty()) throw std::invalid_argument("kl_div: ground truth has zero mass");
  if (pa.empty()) {
    warn("kl_div: prediction has zero mass, treating it as all zeros");
    pa.assign(qb.size(), 0.0);
  }
  double s = 0;
  for (size_t i = 0; i < qb.size(); ++i) {
    if (qb[i] > 0) s += qb[i] * std::log(qb[i] / (pa[i] + kKlEps));
  }
  return s;
}

MetricRow score(const std::string& name, const Tensor& pred, const Tensor& gt, const FixationSet& fix) {
  MetricRow r;
  r.sample = name;
  r.cc = cc(pred, gt);
  r.nss = nss(pred, fix);
  r.aucj = auc_judd(pred, fix);
  r.sim = sim(pred, gt);
  r.kl = kl_div(pred, gt);
  return r;
}

MetricTable tabulate(std::vector<MetricRow> rows) {
  MetricTable t;
  t.rows = std::move(rows);
  t.mean.sample = "mean";
  if (t.rows.empty()) return t;
  for (const auto& r : t.rows) {
    t.mean.cc += r.cc;
    t.mean.nss += r.nss;
    t.mean.aucj += r.aucj;
    t.mean.sim += r.sim;
    t.mean.kl += r.kl;
  }
  const double n = static_cast<double>(t.rows.size());
  t.mean.cc /= n;
  t.mean.nss /= n;
  t.mean.aucj /= n;
  t.mean.sim /= n;
  t.mean.kl /= n;
  return t;
}

std::string MetricTable::csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "sample,cc,nss,aucj,sim,kl\n";
  auto line = [&](const MetricRow& r) {
    os << r.sample << ',' << r.cc << ',' << r.nss << ',' << r.aucj << ',' << r.sim << ',' << r.kl << '\n';
  };
  for (const auto& r : rows) line(r);
  line(mean);
  return os.str();
}

std::string MetricTable::text() const {
  size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.sample.size());
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(static_cast<int>(width)) << "sample" << std::right;
  for (const char* h : {"CC", "NSS", "AUC-J", "SIM", "KL"}) os << std::setw(9) << h;
  os << '\n';
  auto line = [&](const MetricRow& r) {
    os << std::left << std::setw(static_cast<int>(width)) << r.sample << std::right << std::setw(9) << r.cc
       << std::setw(9) << r.nss << std::setw(9) << r.aucj << std::setw(9) << r.sim << std::setw(9) << r.kl << '\n';
  };
  for (const auto& r : rows) line(r);
  os << std::string(width + 45, '-') << '\n';
  line(mean);
  return os.str();
}

MetricTable evaluate(const std::vector<EvalItem>& items, int jobs) {
  std::vector<MetricRow> rows(items.size());
  auto work = [&](size_t begin, size_t stride) {
    for (size_t i = begin; i < items.size(); i += stride) {
      const auto& it = items[i];
      rows[i] = score(it.name, read_pgm(it.pred_path), read_pgm(it.gt_path), read_fixations(it.fix_path));
    }
  };
  const size_t workers = std::clamp<size_t>(static_cast<size_t>(std::max(jobs, 1)), 1, std::max<size_t>(items.size(), 1));
  std::vector<std::future<void>> futs;
  for (size_t w = 1; w < workers; ++w) futs.push_back(std::async(std::launch::async, work, w, workers));
  work(0, workers);
  for (auto& f : futs) f.get();
  return tabulate(std::move(rows));
}

MetricTable evaluate(const std::string& pred_dir, const std::string& gt_dir, int jobs) {
  if (!fs::is_directory(gt_dir)) throw std::runtime_error("ground-truth directory not found: " + gt_dir);
  std::vector<EvalItem> items;
  for (const auto& e : fs::directory_iterator(gt_dir)) {
    if (e.path().extension() != ".pgm") continue;
    const std::string stem = e.path().stem().string();
    const fs::path pred = fs::path(pred_dir) / (stem + ".pgm");
    if (!fs::exists(pred)) throw std::runtime_error("missing prediction " + pred.string());
    items.push_back({stem, pred.string(), e.path().string(), (fs::path(gt_dir) / (stem + ".fix")).string()});
  }
  if (items.empty()) throw std::runtime_error("no ground-truth maps (*.pgm) in " + gt_dir);
  std::sort(items.begin(), items.end(), [](const EvalItem& a, const EvalItem& b) { return a.name < b.name; });
  return evaluate(items, jobs);
}

namespace {

std::string read_token(std::istream& is) {
  std::string tok;
  while (is) {
    is >> std::ws;
    if (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      continue;
    }
    is >> tok;
    break;
  }
  return tok;
}

}  // namespace

Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  if (read_token(is) != "P5") throw std::runtime_error(path + " is not a binary PGM (P5)");
  int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(read_token(is));
    h = std::stoll(read_token(is));
    maxval = std::stoll(read_token(is));
  } catch (const std::exception&) {
    throw std::runtime_error(path + ": malformed PGM header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw std::runtime_error(path + ": bad PGM header values");
  is.get();  // single whitespace byte before the raster
  const int bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(static_cast<size_t>(w * h * bytes));
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (is.gcount() != static_cast<std::streamsize>(raw.size())) throw std::runtime_error(path + ": truncated PGM");
  std::vector<double> v(w * h);
  for (int64_t i = 0; i < w * h; ++i) {
    const unsigned x = bytes == 2 ? (raw[2 * i] << 8) | raw[2 * i + 1] : raw[i];
    v[i] = static_cast<double>(x) / static_cast<double>(maxval);
  }
  return Tensor({h, w}, std::move(v));
}

void write_pgm(const std::string& path, const Tensor& map01, int bits) {
  if (bits != 8 && bits != 16) throw std::invalid_argument("PGM depth must be 8 or 16 bits");
  const Map2 m = as_map(map01, "map");
  const unsigned maxval = bits == 16 ? 65535u : 255u;
  std::string out = "P5\n" + std::to_string(m.w) + " " + std::to_string(m.h) + "\n" + std::to_string(maxval) + "\n";
  for (double v : m.v) {
    const auto x = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * maxval));
    if (bits == 16) out.push_back(static_cast<char>(x >> 8));
    out.push_back(static_cast<char>(x & 0xff));
  }
  atomic_write(path, out);
}

FixationSet read_fixations(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  FixationSet fix;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Fixation f;
    if (!(ls >> f.row >> f.col)) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected `row col`");
    fix.push_back(f);
  }
  return fix;
}

void write_fixations(const std::string& path, const FixationSet& fix) {
  std::string out;
  for (const auto& f : fix) out += std::to_string(f.row) + " " + std::to_string(f.col) + "\n";
  atomic_write(path, out);
}

}  // namespace diffsal::metrics
