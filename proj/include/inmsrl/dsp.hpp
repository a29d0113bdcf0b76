#pragma once

#include <complex>
#include <filesystem>
#include <span>
#include <vector>

#include "inmsrl/types.hpp"

namespace inmsrl::dsp {

inline constexpr int kDefaultSampleRate = 44100;
inline constexpr int kDefaultWindow = 2048;
inline constexpr int kDefaultHop = 512;
inline constexpr int kDefaultMels = 259;
inline constexpr double kLogFloor = 1e-6;

struct Waveform {
  std::vector<float> samples;
  int sample_rate = kDefaultSampleRate;

  std::size_t size() const { return samples.size(); }
  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// frames x bins, row-major (frame-major).
struct ComplexSpectrogram {
  int frames = 0;
  int bins = 0;
  int window = kDefaultWindow;
  int hop = kDefaultHop;
  int sample_rate = kDefaultSampleRate;
  std::size_t signal_length = 0;
  std::vector<std::complex<double>> data;

  std::complex<double>& at(int t, int k) { return data[static_cast<std::size_t>(t) * bins + k]; }
  const std::complex<double>& at(int t, int k) const {
    return data[static_cast<std::size_t>(t) * bins + k];
  }
};

struct MagnitudeSpectrogram {
  int frames = 0;
  int bins = 0;
  int window = kDefaultWindow;
  int sample_rate = kDefaultSampleRate;
  std::vector<double> data;

  double& at(int t, int k) { return data[static_cast<std::size_t>(t) * bins + k]; }
  double at(int t, int k) const { return data[static_cast<std::size_t>(t) * bins + k]; }
};

struct MelSpectrogram {
  int frames = 0;
  int n_mels = 0;
  std::vector<double> data;

  double at(int t, int m) const { return data[static_cast<std::size_t>(t) * n_mels + m]; }
};

/// Periodic Hann window of the given length.
std::vector<double> hann(int length);

ComplexSpectrogram stft(const Waveform& w, int window = kDefaultWindow, int hop = kDefaultHop);

/// Weighted overlap-add inverse. Requires window/hop to be a multiple of 4
/// so the squared Hann windows sum to a constant.
Waveform istft(const ComplexSpectrogram& s);

MagnitudeSpectrogram magnitude(const ComplexSpectrogram& s);

/// Replaces the magnitude of every cell with `mag` while keeping the phase.
ComplexSpectrogram with_magnitude(const ComplexSpectrogram& s, const MagnitudeSpectrogram& mag);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular HTK-style filterbank, bins x n_mels row-major, peak weight 1.
struct MelFilterbank {
  int bins = 0;
  int n_mels = 0;
  std::vector<double> weights;

  double at(int k, int m) const { return weights[static_cast<std::size_t>(k) * n_mels + m]; }
};

MelFilterbank mel_filterbank(int bins, int n_mels, int sample_rate);

MelSpectrogram log_mel(const MagnitudeSpectrogram& m, int n_mels = kDefaultMels);

MagnitudeSpectrogram hadamard_separate(const MagnitudeSpectrogram& mix,
                                       const MagnitudeSpectrogram& mask);

/// Whole-segment signal-to-distortion ratio in dB; +inf when est == ref.
double global_sdr(std::span<const float> est, std::span<const float> ref);
inline double global_sdr(const Waveform& est, const Waveform& ref) {
  return global_sdr(std::span<const float>(est.samples), std::span<const float>(ref.samples));
}

double rms(std::span<const float> x);
/// RMS level in dBFS (-inf for digital silence).
double rms_dbfs(std::span<const float> x);

// RIFF WAV, mono. PCM16 and float32 are read; stereo is averaged to mono.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w);

}  // namespace inmsrl::dsp
