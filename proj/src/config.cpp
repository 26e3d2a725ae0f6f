#include "diffsal/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace diffsal {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& why) {
  throw std::invalid_argument("invalid value '" + value + "' for " + key + ": " + why);
}

int64_t to_int(const std::string& key, const std::string& v, int64_t lo, int64_t hi) {
  int64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected an integer");
  if (x < lo || x > hi) bad(key, v, "out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return x;
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a non-negative integer");
  return x;
}

double to_double(const std::string& key, const std::string& v, double lo, double hi) {
  double x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(x)) bad(key, v, "expected a finite number");
  if (x < lo || x > hi) bad(key, v, "out of range");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v, "expected true or false");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F parse) {
  std::vector<T> out;
  for (const auto& s : split_list(v)) {
    try {
      out.push_back(parse(s));
    } catch (const std::invalid_argument& e) {
      bad(key, v, e.what());
    }
  }
  if (out.empty()) bad(key, v, "expected a comma-separated list");
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F str) {
  std::string s;
  for (size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + str(xs[i]);
  return s;
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

std::string fmt(bool b) { return b ? "true" : "false"; }

template <typename E, typename P>
E parse_enum(const std::string& key, const std::string& v, P parse) {
  try {
    return parse(v);
  } catch (const std::invalid_argument& e) {
    bad(key, v, e.what());
  }
}

struct Entry {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

constexpr int64_t kBig = int64_t{1} << 40;

const std::map<std::string, Entry>& table() {
  using C = RunConfig;
  using S = const std::string&;
  static const std::map<std::string, Entry> t = {
      {"seed", {[](C& c, S k, S v) { c.seed = to_u64(k, v); }, [](const C& c) { return std::to_string(c.seed); }}},
      {"jobs", {[](C& c, S k, S v) { c.jobs = static_cast<int>(to_int(k, v, 1, 1024)); },
                [](const C& c) { return std::to_string(c.jobs); }}},
      {"out", {[](C& c, S k, S v) {
                 if (v.empty()) bad(k, v, "expected a path");
                 c.out = v;
               },
               [](const C& c) { return c.out; }}},

      {"synth.n", {[](C& c, S k, S v) { c.dataset_size = to_int(k, v, 0, kBig); },
                   [](const C& c) { return std::to_string(c.dataset_size); }}},
      {"synth.frames", {[](C& c, S k, S v) { c.scene.frames = to_int(k, v, 1, 4096); },
                        [](const C& c) { return std::to_string(c.scene.frames); }}},
      {"synth.height", {[](C& c, S k, S v) { c.scene.height = to_int(k, v, 2, 8192); },
                        [](const C& c) { return std::to_string(c.scene.height); }}},
      {"synth.width", {[](C& c, S k, S v) { c.scene.width = to_int(k, v, 2, 8192); },
                       [](const C& c) { return std::to_string(c.scene.width); }}},
      {"synth.min_objects", {[](C& c, S k, S v) { c.scene.min_objects = to_int(k, v, 1, 64); },
                             [](const C& c) { return std::to_string(c.scene.min_objects); }}},
      {"synth.max_objects", {[](C& c, S k, S v) { c.scene.max_objects = to_int(k, v, 1, 64); },
                             [](const C& c) { return std::to_string(c.scene.max_objects); }}},
      {"synth.trajectory",
       {[](C& c, S k, S v) { c.scene.trajectory = parse_enum<synth::Trajectory>(k, v, synth::parse_trajectory); },
        [](const C& c) { return synth::to_string(c.scene.trajectory); }}},
      {"synth.mixed_trajectories", {[](C& c, S k, S v) { c.scene.mixed_trajectories = to_bool(k, v); },
                                    [](const C& c) { return fmt(c.scene.mixed_trajectories); }}},
      {"synth.identical_objects", {[](C& c, S k, S v) { c.scene.identical_objects = to_bool(k, v); },
                                   [](const C& c) { return fmt(c.scene.identical_objects); }}},
      {"synth.flip_sounding", {[](C& c, S k, S v) { c.scene.flip_sounding = to_bool(k, v); },
                               [](const C& c) { return fmt(c.scene.flip_sounding); }}},
      {"synth.paired_sounding", {[](C& c, S k, S v) { c.scene.paired_sounding = to_bool(k, v); },
                                 [](const C& c) { return fmt(c.scene.paired_sounding); }}},
      {"synth.speed_min", {[](C& c, S k, S v) { c.scene.speed_min = to_double(k, v, 0, 1e3); },
                           [](const C& c) { return fmt(c.scene.speed_min); }}},
      {"synth.speed_max", {[](C& c, S k, S v) { c.scene.speed_max = to_double(k, v, 0, 1e3); },
                           [](const C& c) { return fmt(c.scene.speed_max); }}},
      {"synth.object_sigma", {[](C& c, S k, S v) { c.scene.object_sigma_frac = to_double(k, v, 1e-3, 0.5); },
                              [](const C& c) { return fmt(c.scene.object_sigma_frac); }}},
      {"synth.gt_sigma", {[](C& c, S k, S v) { c.scene.gt_sigma_frac = to_double(k, v, 1e-3, 1.0); },
                          [](const C& c) { return fmt(c.scene.gt_sigma_frac); }}},
      {"synth.noise", {[](C& c, S k, S v) { c.scene.noise = to_double(k, v, 0, 1); },
                       [](const C& c) { return fmt(c.scene.noise); }}},
      {"synth.sample_rate", {[](C& c, S k, S v) {
                               c.scene.sample_rate = static_cast<int>(to_int(k, v, 1000, 192000));
                               c.audio.sample_rate = c.scene.sample_rate;
                             },
                             [](const C& c) { return std::to_string(c.scene.sample_rate); }}},
      {"synth.duration", {[](C& c, S k, S v) { c.scene.duration_s = to_double(k, v, 1e-3, 600); },
                          [](const C& c) { return fmt(c.scene.duration_s); }}},
      {"synth.fixations", {[](C& c, S k, S v) { c.scene.fixations = to_int(k, v, 1, 1 << 20); },
                           [](const C& c) { return std::to_string(c.scene.fixations); }}},

      {"audio.window", {[](C& c, S k, S v) {
                          const int64_t n = to_int(k, v, 2, 1 << 16);
                          if (n & (n - 1)) bad(k, v, "must be a power of two");
                          c.audio.window = n;
                        },
                        [](const C& c) { return std::to_string(c.audio.window); }}},
      {"audio.hop_ms", {[](C& c, S k, S v) { c.audio.hop_ms = to_double(k, v, 1e-3, 1e4); },
                        [](const C& c) { return fmt(c.audio.hop_ms); }}},
      {"audio.n_mels", {[](C& c, S k, S v) { c.audio.n_mels = to_int(k, v, 2, 4096); },
                        [](const C& c) { return std::to_string(c.audio.n_mels); }}},
      {"audio.f_min", {[](C& c, S k, S v) { c.audio.f_min = to_double(k, v, 0, 1e6); },
                       [](const C& c) { return fmt(c.audio.f_min); }}},
      {"audio.f_max", {[](C& c, S k, S v) { c.audio.f_max = to_double(k, v, 0, 1e6); },
                       [](const C& c) { return fmt(c.audio.f_max); }}},
      {"audio.slice_frames", {[](C& c, S k, S v) { c.audio.slice_frames = to_int(k, v, 1, 1 << 16); },
                              [](const C& c) { return std::to_string(c.audio.slice_frames); }}},
      {"audio.slices", {[](C& c, S k, S v) { c.audio.slices = to_int(k, v, 1, 1024); },
                        [](const C& c) { return std::to_string(c.audio.slices); }}},

      {"model.c_base", {[](C& c, S k, S v) { c.model.c_base = to_int(k, v, 1, 4096); },
                        [](const C& c) { return std::to_string(c.model.c_base); }}},
      {"model.heads", {[](C& c, S k, S v) { c.model.heads = to_int(k, v, 1, 256); },
                       [](const C& c) { return std::to_string(c.model.heads); }}},
      {"model.stages", {[](C& c, S k, S v) { c.model.stages = to_int(k, v, 4, 4); },
                        [](const C& c) { return std::to_string(c.model.stages); }}},
      {"model.fusion", {[](C& c, S k, S v) { c.model.fusion = parse_enum<unet::Fusion>(k, v, unet::parse_fusion); },
                        [](const C& c) { return unet::to_string(c.model.fusion); }}},
      {"model.attention",
       {[](C& c, S k, S v) { c.model.attention = parse_enum<unet::Attention>(k, v, unet::parse_attention); },
        [](const C& c) { return unet::to_string(c.model.attention); }}},
      {"model.mode", {[](C& c, S k, S v) { c.model.mode = parse_enum<unet::Mode>(k, v, unet::parse_mode); },
                      [](const C& c) { return unet::to_string(c.model.mode); }}},
      {"model.swap_kv", {[](C& c, S k, S v) { c.model.swap_kv = to_bool(k, v); },
                         [](const C& c) { return fmt(c.model.swap_kv); }}},
      {"model.head_bias", {[](C& c, S k, S v) { c.model.head_bias = to_double(k, v, -20, 20); },
                           [](const C& c) { return fmt(c.model.head_bias); }}},

      {"train.lr", {[](C& c, S k, S v) {
                      c.train.learning_rate = to_double(k, v, 0, 10);
                      if (c.train.learning_rate <= 0) bad(k, v, "must be positive");
                    },
                    [](const C& c) { return fmt(c.train.learning_rate); }}},
      {"train.batch_size", {[](C& c, S k, S v) { c.train.batch_size = to_int(k, v, 1, 1 << 16); },
                            [](const C& c) { return std::to_string(c.train.batch_size); }}},
      {"train.epochs", {[](C& c, S k, S v) { c.train.epochs = to_int(k, v, 1, kBig); },
                        [](const C& c) { return std::to_string(c.train.epochs); }}},
      {"train.max_steps", {[](C& c, S k, S v) { c.train.max_steps = to_int(k, v, 0, kBig); },
                           [](const C& c) { return std::to_string(c.train.max_steps); }}},
      {"train.loss", {[](C& c, S k, S v) { c.train.loss = parse_enum<training::Loss>(k, v, training::parse_loss); },
                      [](const C& c) { return training::to_string(c.train.loss); }}},
      {"train.clip_norm", {[](C& c, S k, S v) {
                             c.train.clip_norm = to_double(k, v, 0, 1e12);
                             if (c.train.clip_norm <= 0) bad(k, v, "must be positive");
                           },
                           [](const C& c) { return fmt(c.train.clip_norm); }}},
      {"train.train_encoders", {[](C& c, S k, S v) { c.train.train_encoders = to_bool(k, v); },
                                [](const C& c) { return fmt(c.train.train_encoders); }}},

      {"diffusion.T", {[](C& c, S k, S v) { c.train.T = to_int(k, v, 1, 1 << 20); },
                       [](const C& c) { return std::to_string(c.train.T); }}},
      {"diffusion.steps", {[](C& c, S k, S v) { c.sample_steps = to_int(k, v, 1, 1 << 20); },
                           [](const C& c) { return std::to_string(c.sample_steps); }}},

      {"ablate.fusion", {[](C& c, S k, S v) { c.ablate.fusions = parse_list<unet::Fusion>(k, v, unet::parse_fusion); },
                         [](const C& c) { return join(c.ablate.fusions, [](auto x) { return unet::to_string(x); }); }}},
      {"ablate.attention",
       {[](C& c, S k, S v) { c.ablate.attentions = parse_list<unet::Attention>(k, v, unet::parse_attention); },
        [](const C& c) { return join(c.ablate.attentions, [](auto x) { return unet::to_string(x); }); }}},
      {"ablate.loss", {[](C& c, S k, S v) { c.ablate.losses = parse_list<training::Loss>(k, v, training::parse_loss); },
                       [](const C& c) { return join(c.ablate.losses, [](auto x) { return training::to_string(x); }); }}},
      {"ablate.mode", {[](C& c, S k, S v) { c.ablate.modes = parse_list<unet::Mode>(k, v, unet::parse_mode); },
                       [](const C& c) { return join(c.ablate.modes, [](auto x) { return unet::to_string(x); }); }}},
      {"ablate.steps", {[](C& c, S k, S v) {
                          c.ablate.steps = parse_list<int64_t>(k, v, [&](const std::string& s) {
                            return to_int(k, s, 1, 1 << 20);
                          });
                        },
                        [](const C& c) { return join(c.ablate.steps, [](auto x) { return std::to_string(x); }); }}},
      {"ablate.train_steps", {[](C& c, S k, S v) { c.ablate.train_steps = to_int(k, v, 1, kBig); },
                              [](const C& c) { return std::to_string(c.ablate.train_steps); }}},
  };
  return t;
}

const Entry& entry(const std::string& key) {
  const auto& t = table();
  const auto it = t.find(key);
  if (it == t.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  return it->second;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { entry(key).set(*this, key, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return entry(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, e] : table()) out.push_back(name);
    return out;
  }();
  return k;
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(n) + ": expected 'key = value'");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path);
}

std::string RunConfig::dump() const {
  std::string s;
  for (const auto& k : keys()) s += k + " = " + get(k) + "\n";
  return s;
}

unet::ModelConfig RunConfig::model_config() const {
  unet::ModelConfig m = model;
  m.frames = scene.frames;
  m.height = scene.height;
  m.width = scene.width;
  m.audio_slices = audio.slices;
  m.audio_height = audio.slice_frames;
  m.audio_width = audio.n_mels;
  return m;
}

void RunConfig::validate() const {
  scene.validate();
  train.validate();
  model_config().validate();
  if (audio.sample_rate != scene.sample_rate) throw std::invalid_argument("audio and scene sample rates differ");
  if (audio.hop_samples() < 1 || audio.hop_samples() > audio.window) {
    throw std::invalid_argument("audio.hop_ms gives a hop outside [1, audio.window] samples");
  }
  if (audio.resolved_f_max() > audio.sample_rate / 2.0 || audio.f_min >= audio.resolved_f_max()) {
    throw std::invalid_argument("audio mel range must satisfy f_min < f_max <= sample_rate / 2");
  }
  const double samples = scene.duration_s * scene.sample_rate;
  if (samples < static_cast<double>(audio.window)) {
    throw std::invalid_argument("synth.duration is shorter than one audio window");
  }
}

}  // namespace diffsal
