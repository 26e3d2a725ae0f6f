#pragma once

#include <complex>
#include <string>
#include <vector>

#include "diffsal/tensor.hpp"

namespace diffsal::audio {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

enum class Window { kHann, kRectangular };

struct Spectrogram {
  int64_t frames = 0;
  int64_t bins = 0;  // window_size / 2 + 1
  int64_t window_size = 0;
  int64_t hop = 0;
  std::vector<std::complex<double>> values;  // [frames, bins]

  std::complex<double> at(int64_t frame, int64_t bin) const { return values[frame * bins + bin]; }
  Tensor power() const;  // |X|^2 as [frames, bins]
};

struct AudioConfig {
  int sample_rate = 16000;
  int64_t window = 512;
  double hop_ms = 11.0;  // STFT hop; 176 samples at 16 kHz
  int64_t n_mels = 40;
  double f_min = 0.0;
  double f_max = 0.0;  // 0 means sample_rate / 2
  int64_t slice_frames = 40;
  int64_t slices = 4;

  int64_t hop_samples() const;
  double resolved_f_max() const { return f_max > 0.0 ? f_max : sample_rate / 2.0; }
  // 9 slices of 112 x 192, for shape checks at full input size.
  static AudioConfig full_scale_preset();
};

struct LogMelSlices {
  Tensor slices;  // [T_a, H_a, W_a, 1]
  double hop_ms = 0.0;
  int64_t count() const { return slices.size(0); }
};

// In-place iterative radix-2 FFT; size must be a power of two.
void fft(std::vector<std::complex<double>>& x);

Spectrogram stft(const Waveform& w, int64_t window_size, int64_t hop, Window window = Window::kHann);

double hz_to_mel(double hz);
double mel_to_hz(double mel);
// Triangular HTK filterbank, [n_mels, n_fft/2 + 1].
Tensor mel_filterbank(int64_t n_mels, int64_t n_fft, int sample_rate, double f_min, double f_max);

inline constexpr double kLogFloor = 1e-10;

// log(power x filterbank^T + floor), [frames, n_mels].
Tensor log_mel(const Spectrogram& spec, int64_t n_mels, double f_min, double f_max, int sample_rate);

// Slice starts spread evenly across the available frames.
int64_t even_slice_hop(int64_t frames, int64_t slice_frames, int64_t count);

// Cuts `count` windows of `slice_frames` frames, `hop_frames` apart; a
// window running past the end is padded by replicating the last frame.
LogMelSlices slice(const Tensor& mel, int64_t slice_frames, int64_t hop_frames, int64_t count,
                   double frame_hop_ms = 0.0);

// Full frontend: STFT -> log-mel -> evenly spaced slices.
LogMelSlices frontend(const Waveform& w, const AudioConfig& cfg);

Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);  // mono PCM-16
Waveform read_raw_f32(const std::string& path, int sample_rate);

}  // namespace diffsal::audio
