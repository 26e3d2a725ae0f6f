#include "diffsal/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "diffsal/serialize.hpp"

namespace diffsal::audio {

namespace {

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace

int64_t AudioConfig::hop_samples() const {
  return static_cast<int64_t>(std::llround(hop_ms * 1e-3 * sample_rate));
}

AudioConfig AudioConfig::full_scale_preset() {
  AudioConfig c;
  c.window = 1024;
  c.n_mels = 192;
  c.slice_frames = 112;
  c.slices = 9;
  return c;
}

Tensor Spectrogram::power() const {
  std::vector<double> p(values.size());
  for (size_t i = 0; i < values.size(); ++i) p[i] = std::norm(values[i]);
  return Tensor({frames, bins}, std::move(p));
}

void fft(std::vector<std::complex<double>>& x) {
  const size_t n = x.size();
  if (!is_pow2(static_cast<int64_t>(n))) throw std::invalid_argument("fft size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    for (size_t start = 0; start < n; start += len) {
      for (size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> tw = std::polar(1.0, ang * static_cast<double>(k));
        const std::complex<double> u = x[start + k];
        const std::complex<double> v = x[start + k + len / 2] * tw;
        x[start + k] = u + v;
        x[start + k + len / 2] = u - v;
      }
    }
  }
}

Spectrogram stft(const Waveform& w, int64_t window_size, int64_t hop, Window window) {
  if (!is_pow2(window_size)) throw std::invalid_argument("STFT window size must be a power of two");
  if (hop < 1 || hop > window_size) throw std::invalid_argument("STFT hop must be in [1, window_size]");
  const int64_t len = static_cast<int64_t>(w.samples.size());
  if (len < window_size) {
    throw std::invalid_argument("signal of " + std::to_string(len) + " samples is shorter than one window of " +
                                std::to_string(window_size));
  }
  Spectrogram s;
  s.window_size = window_size;
  s.hop = hop;
  s.frames = (len - window_size) / hop + 1;
  s.bins = window_size / 2 + 1;
  s.values.resize(s.frames * s.bins);
  std::vector<double> win(window_size, 1.0);
  if (window == Window::kHann) {
    for (int64_t i = 0; i < window_size; ++i) {
      win[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(window_size));
    }
  }
  std::vector<std::complex<double>> buf(window_size);
  for (int64_t f = 0; f < s.frames; ++f) {
    for (int64_t i = 0; i < window_size; ++i) buf[i] = w.samples[f * hop + i] * win[i];
    fft(buf);
    std::copy(buf.begin(), buf.begin() + s.bins, s.values.begin() + f * s.bins);
  }
  return s;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Tensor mel_filterbank(int64_t n_mels, int64_t n_fft, int sample_rate, double f_min, double f_max) {
  if (n_mels < 2) throw std::invalid_argument("n_mels must be at least 2");
  if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
    throw std::invalid_argument("invalid mel frequency range [" + std::to_string(f_min) + ", " +
                                std::to_string(f_max) + "] for sample rate " + std::to_string(sample_rate));
  }
  const int64_t bins = n_fft / 2 + 1;
  const double lo = hz_to_mel(f_min), hi = hz_to_mel(f_max);
  std::vector<double> edges(n_mels + 2);
  for (int64_t i = 0; i < n_mels + 2; ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(n_fft);
  std::vector<double> fb(n_mels * bins, 0.0);
  for (int64_t m = 0; m < n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    double row_sum = 0.0;
    for (int64_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double v = 0.0;
      if (f > left && f <= center) {
        v = (f - left) / (center - left);
      } else if (f > center && f < right) {
        v = (right - f) / (right - center);
      }
      fb[m * bins + k] = v;
      row_sum += v;
    }
    // A filter narrower than the bin spacing falls between bins; give it
    // the bin nearest its center so every band carries energy.
    if (row_sum == 0.0) {
      const int64_t k = std::clamp<int64_t>(std::llround(center / bin_hz), 0, bins - 1);
      fb[m * bins + k] = 1.0;
    }
  }
  return Tensor({n_mels, bins}, std::move(fb));
}

Tensor log_mel(const Spectrogram& spec, int64_t n_mels, double f_min, double f_max, int sample_rate) {
  const Tensor fb = mel_filterbank(n_mels, spec.window_size, sample_rate, f_min, f_max);
  const Tensor power = spec.power();
  std::vector<double> out(spec.frames * n_mels, 0.0);
  for (int64_t f = 0; f < spec.frames; ++f)
    for (int64_t m = 0; m < n_mels; ++m) {
      double e = 0.0;
      for (int64_t k = 0; k < spec.bins; ++k) e += power.data()[f * spec.bins + k] * fb.data()[m * spec.bins + k];
      out[f * n_mels + m] = std::log(e + kLogFloor);
    }
  return Tensor({spec.frames, n_mels}, std::move(out));
}

int64_t even_slice_hop(int64_t frames, int64_t slice_frames, int64_t count) {
  if (count <= 1 || frames <= slice_frames) return slice_frames;
  return std::max<int64_t>(1, (frames - slice_frames) / (count - 1));
}

LogMelSlices slice(const Tensor& mel, int64_t slice_frames, int64_t hop_frames, int64_t count, double frame_hop_ms) {
  if (count < 1) throw std::invalid_argument("slice count must be at least 1");
  if (mel.dim() != 2) throw ShapeError("log-mel map must be [frames, n_mels], got " + shape_str(mel.shape()));
  if (slice_frames < 1 || hop_frames < 1) throw std::invalid_argument("slice length and hop must be positive");
  const int64_t frames = mel.size(0), n_mels = mel.size(1);
  std::vector<double> out(count * slice_frames * n_mels);
  for (int64_t s = 0; s < count; ++s)
    for (int64_t r = 0; r < slice_frames; ++r) {
      const int64_t src = std::min(s * hop_frames + r, frames - 1);
      std::copy(mel.data().begin() + src * n_mels, mel.data().begin() + (src + 1) * n_mels,
                out.begin() + (s * slice_frames + r) * n_mels);
    }
  LogMelSlices ls;
  ls.slices = Tensor({count, slice_frames, n_mels, 1}, std::move(out));
  ls.hop_ms = static_cast<double>(hop_frames) * frame_hop_ms;
  return ls;
}

LogMelSlices frontend(const Waveform& w, const AudioConfig& cfg) {
  const int64_t hop = cfg.hop_samples();
  const Spectrogram spec = stft(w, cfg.window, hop);
  const Tensor mel = log_mel(spec, cfg.n_mels, cfg.f_min, cfg.resolved_f_max(), w.sample_rate);
  const int64_t slice_hop = even_slice_hop(mel.size(0), cfg.slice_frames, cfg.slices);
  return slice(mel, cfg.slice_frames, slice_hop, cfg.slices, cfg.hop_ms);
}

namespace {

template <class T>
void put(std::string& s, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  s.append(b, sizeof(T));
}

template <class T>
T get(const std::string& s, size_t off) {
  if (off + sizeof(T) > s.size()) throw std::runtime_error("truncated WAV file");
  T v;
  std::memcpy(&v, s.data() + off, sizeof(T));
  return v;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

Waveform read_wav(const std::string& path) {
  const std::string b = slurp(path);
  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0) {
    throw std::runtime_error(path + " is not a RIFF/WAVE file");
  }
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  size_t off = 12;
  Waveform w;
  bool have_fmt = false;
  while (off + 8 <= b.size()) {
    const std::string id = b.substr(off, 4);
    const uint32_t size = get<uint32_t>(b, off + 4);
    const size_t body = off + 8;
    if (id == "fmt ") {
      format = get<uint16_t>(b, body);
      channels = get<uint16_t>(b, body + 2);
      rate = get<uint32_t>(b, body + 4);
      bits = get<uint16_t>(b, body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw std::runtime_error(path + ": data chunk before fmt chunk");
      if (channels != 1) throw std::runtime_error(path + ": only mono WAV is supported");
      w.sample_rate = static_cast<int>(rate);
      const size_t n = std::min<size_t>(size, b.size() - body);
      if (format == 1 && bits == 16) {
        for (size_t i = 0; i + 1 < n; i += 2) w.samples.push_back(get<int16_t>(b, body + i) / 32768.0);
      } else if (format == 3 && bits == 32) {
        for (size_t i = 0; i + 3 < n; i += 4) w.samples.push_back(get<float>(b, body + i));
      } else {
        throw std::runtime_error(path + ": unsupported WAV encoding (need PCM-16 or float32)");
      }
      return w;
    }
    off = body + size + (size & 1);
  }
  throw std::runtime_error(path + ": no data chunk");
}

void write_wav(const std::string& path, const Waveform& w) {
  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  std::string b;
  b += "RIFF";
  put<uint32_t>(b, 36 + n * 2);
  b += "WAVEfmt ";
  put<uint32_t>(b, 16);
  put<uint16_t>(b, 1);
  put<uint16_t>(b, 1);
  put<uint32_t>(b, static_cast<uint32_t>(w.sample_rate));
  put<uint32_t>(b, static_cast<uint32_t>(w.sample_rate) * 2);
  put<uint16_t>(b, 2);
  put<uint16_t>(b, 16);
  b += "data";
  put<uint32_t>(b, n * 2);
  for (double s : w.samples) {
    put<int16_t>(b, static_cast<int16_t>(std::lround(std::clamp(s, -1.0, 32767.0 / 32768.0) * 32768.0)));
  }
  atomic_write(path, b);
}

Waveform read_raw_f32(const std::string& path, int sample_rate) {
  const std::string b = slurp(path);
  Waveform w;
  w.sample_rate = sample_rate;
  for (size_t i = 0; i + 3 < b.size(); i += 4) w.samples.push_back(get<float>(b, i));
  return w;
}

}  // namespace diffsal::audio
