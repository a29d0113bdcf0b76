#include "inmsrl/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

namespace inmsrl::dsp {

static_assert(std::endian::native == std::endian::little, "WAV and checkpoint I/O assume little-endian");

namespace {

// FFTW planning is not thread-safe; execution on fresh buffers is.
std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

template <typename T>
using FftwBuffer = std::unique_ptr<T[], FftwFree>;

struct Plans {
  fftw_plan forward;
  fftw_plan inverse;
};

const Plans& plans_for(int n) {
  static std::map<int, Plans> cache;
  std::lock_guard lock(plan_mutex());
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  FftwBuffer<double> re(fftw_alloc_real(n));
  FftwBuffer<fftw_complex> cx(fftw_alloc_complex(n / 2 + 1));
  Plans p{};
  p.forward = fftw_plan_dft_r2c_1d(n, re.get(), cx.get(), FFTW_ESTIMATE);
  p.inverse = fftw_plan_dft_c2r_1d(n, cx.get(), re.get(), FFTW_ESTIMATE);
  return cache.emplace(n, p).first->second;
}

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace

std::vector<double> hann(int length) {
  std::vector<double> w(length);
  for (int n = 0; n < length; ++n)
    w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / length);
  return w;
}

ComplexSpectrogram stft(const Waveform& w, int window, int hop) {
  require(is_power_of_two(window), "stft: window must be a power of two, got " + std::to_string(window));
  require(hop >= 1 && hop <= window, "stft: hop must be in [1, window]");
  require(w.samples.size() >= static_cast<std::size_t>(window),
          "stft: input has " + std::to_string(w.samples.size()) +
              " samples, shorter than one window of " + std::to_string(window));

  ComplexSpectrogram s;
  s.window = window;
  s.hop = hop;
  s.sample_rate = w.sample_rate;
  s.signal_length = w.samples.size();
  s.bins = window / 2 + 1;
  s.frames = 1 + static_cast<int>((w.samples.size() - window) / hop);
  s.data.resize(static_cast<std::size_t>(s.frames) * s.bins);

  const auto win = hann(window);
  const Plans& p = plans_for(window);
  FftwBuffer<double> in(fftw_alloc_real(window));
  FftwBuffer<fftw_complex> out(fftw_alloc_complex(s.bins));
  for (int t = 0; t < s.frames; ++t) {
    const std::size_t off = static_cast<std::size_t>(t) * hop;
    for (int n = 0; n < window; ++n) in[n] = win[n] * static_cast<double>(w.samples[off + n]);
    fftw_execute_dft_r2c(p.forward, in.get(), out.get());
    for (int k = 0; k < s.bins; ++k) s.at(t, k) = {out[k][0], out[k][1]};
  }
  return s;
}

Waveform istft(const ComplexSpectrogram& s) {
  require(is_power_of_two(s.window) && s.bins == s.window / 2 + 1,
          "istft: inconsistent window/bins metadata");
  require(s.hop >= 1 && s.window % s.hop == 0 && (s.window / s.hop) % 4 == 0,
          "istft: hop " + std::to_string(s.hop) + " does not satisfy COLA for window " +
              std::to_string(s.window) + " (window/hop must be a multiple of 4)");
  require(s.frames >= 1, "istft: empty spectrogram");

  const std::size_t span_len = static_cast<std::size_t>(s.frames - 1) * s.hop + s.window;
  const std::size_t out_len = std::max(span_len, s.signal_length);
  std::vector<double> acc(out_len, 0.0);

  const auto win = hann(s.window);
  double win_energy = 0.0;
  for (double v : win) win_energy += v * v;
  const double norm = win_energy / s.hop;

  const Plans& p = plans_for(s.window);
  FftwBuffer<fftw_complex> in(fftw_alloc_complex(s.bins));
  FftwBuffer<double> out(fftw_alloc_real(s.window));
  for (int t = 0; t < s.frames; ++t) {
    for (int k = 0; k < s.bins; ++k) {
      in[k][0] = s.at(t, k).real();
      in[k][1] = s.at(t, k).imag();
    }
    fftw_execute_dft_c2r(p.inverse, in.get(), out.get());
    const std::size_t off = static_cast<std::size_t>(t) * s.hop;
    for (int n = 0; n < s.window; ++n) acc[off + n] += win[n] * out[n] / s.window;
  }

  Waveform w;
  w.sample_rate = s.sample_rate;
  w.samples.resize(s.signal_length ? s.signal_length : span_len);
  for (std::size_t i = 0; i < w.samples.size(); ++i) w.samples[i] = static_cast<float>(acc[i] / norm);
  return w;
}

MagnitudeSpectrogram magnitude(const ComplexSpectrogram& s) {
  MagnitudeSpectrogram m;
  m.frames = s.frames;
  m.bins = s.bins;
  m.window = s.window;
  m.sample_rate = s.sample_rate;
  m.data.resize(s.data.size());
  for (std::size_t i = 0; i < s.data.size(); ++i) m.data[i] = std::abs(s.data[i]);
  return m;
}

ComplexSpectrogram with_magnitude(const ComplexSpectrogram& s, const MagnitudeSpectrogram& mag) {
  require(mag.frames == s.frames && mag.bins == s.bins, "with_magnitude: shape mismatch");
  ComplexSpectrogram out = s;
  for (std::size_t i = 0; i < s.data.size(); ++i) out.data[i] = std::polar(mag.data[i], std::arg(s.data[i]));
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank mel_filterbank(int bins, int n_mels, int sample_rate) {
  require(n_mels >= 1, "mel_filterbank: n_mels must be >= 1");
  require(n_mels <= bins, "mel_filterbank: n_mels " + std::to_string(n_mels) +
                              " exceeds the number of frequency bins " + std::to_string(bins));
  MelFilterbank fb;
  fb.bins = bins;
  fb.n_mels = n_mels;
  fb.weights.assign(static_cast<std::size_t>(bins) * n_mels, 0.0);

  const double nyquist = sample_rate / 2.0;
  const double top = hz_to_mel(nyquist);
  std::vector<double> edges(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i) edges[i] = mel_to_hz(top * i / (n_mels + 1));

  const int window = 2 * (bins - 1);
  for (int k = 0; k < bins; ++k) {
    const double f = static_cast<double>(k) * sample_rate / window;
    for (int m = 0; m < n_mels; ++m) {
      const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
      double v = 0.0;
      if (f > lo && f <= mid)
        v = (f - lo) / (mid - lo);
      else if (f > mid && f < hi)
        v = (hi - f) / (hi - mid);
      fb.weights[static_cast<std::size_t>(k) * n_mels + m] = v;
    }
  }
  return fb;
}

MelSpectrogram log_mel(const MagnitudeSpectrogram& m, int n_mels) {
  const MelFilterbank fb = mel_filterbank(m.bins, n_mels, m.sample_rate);
  for (double v : m.data) require(v >= 0.0, "log_mel: magnitude spectrogram has negative entries");
  MelSpectrogram out;
  out.frames = m.frames;
  out.n_mels = n_mels;
  out.data.assign(static_cast<std::size_t>(m.frames) * n_mels, 0.0);
  for (int t = 0; t < m.frames; ++t) {
    double* row = &out.data[static_cast<std::size_t>(t) * n_mels];
    for (int k = 0; k < m.bins; ++k) {
      const double mag = m.at(t, k);
      if (mag == 0.0) continue;
      const double* w = &fb.weights[static_cast<std::size_t>(k) * n_mels];
      for (int j = 0; j < n_mels; ++j) row[j] += w[j] * mag;
    }
    for (int j = 0; j < n_mels; ++j) row[j] = std::log(row[j] + kLogFloor);
  }
  return out;
}

MagnitudeSpectrogram hadamard_separate(const MagnitudeSpectrogram& mix, const MagnitudeSpectrogram& mask) {
  require(mix.frames == mask.frames && mix.bins == mask.bins,
          "hadamard_separate: mask shape " + std::to_string(mask.frames) + "x" +
              std::to_string(mask.bins) + " does not match mix " + std::to_string(mix.frames) +
              "x" + std::to_string(mix.bins));
  MagnitudeSpectrogram out = mix;
  for (std::size_t i = 0; i < mix.data.size(); ++i) {
    const double g = mask.data[i];
    require(g >= 0.0 && g <= 1.0, "hadamard_separate: mask entries must lie in [0, 1]");
    out.data[i] = mix.data[i] * g;
  }
  return out;
}

double global_sdr(std::span<const float> est, std::span<const float> ref) {
  require(est.size() == ref.size(), "global_sdr: length mismatch (" + std::to_string(est.size()) +
                                        " vs " + std::to_string(ref.size()) + ")");
  double signal = 0.0, residual = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double r = ref[i];
    const double d = r - static_cast<double>(est[i]);
    signal += r * r;
    residual += d * d;
  }
  require(signal > 0.0, "global_sdr: reference is all-zero");
  if (residual == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(signal / residual);
}

double rms(std::span<const float> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (float v : x) acc += static_cast<double>(v) * v;
  return std::sqrt(acc / x.size());
}

double rms_dbfs(std::span<const float> x) {
  const double r = rms(x);
  if (r == 0.0) return -std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(r);
}

// ---------------------------------------------------------------------------
// WAV

namespace {

template <typename T>
T read_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void put_le(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "read_wav: cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(buf.size() >= 12 && std::memcmp(buf.data(), "RIFF", 4) == 0 &&
              std::memcmp(buf.data() + 8, "WAVE", 4) == 0,
          "read_wav: " + path.string() + " is not a RIFF/WAVE file");

  int format = 0, channels = 0, rate = 0, bits = 0;
  const char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::string id(buf.data() + pos, 4);
    const std::size_t len = read_le<std::uint32_t>(buf.data() + pos + 4);
    const char* body = buf.data() + pos + 8;
    require(pos + 8 + len <= buf.size(), "read_wav: truncated chunk in " + path.string());
    if (id == "fmt ") {
      require(len >= 16, "read_wav: short fmt chunk");
      format = read_le<std::uint16_t>(body);
      channels = read_le<std::uint16_t>(body + 2);
      rate = static_cast<int>(read_le<std::uint32_t>(body + 4));
      bits = read_le<std::uint16_t>(body + 14);
      if (format == 0xFFFE && len >= 26) format = read_le<std::uint16_t>(body + 24);
    } else if (id == "data") {
      data = body;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  require(format != 0 && data != nullptr, "read_wav: missing fmt or data chunk in " + path.string());
  require(channels >= 1, "read_wav: zero channels");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  require(pcm16 || f32, "read_wav: only PCM16 and float32 are supported (" + path.string() + ")");

  const std::size_t bytes = bits / 8;
  const std::size_t frames = data_len / (bytes * channels);
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const char* p = data + (i * channels + c) * bytes;
      acc += pcm16 ? read_le<std::int16_t>(p) / 32768.0 : static_cast<double>(read_le<float>(p));
    }
    w.samples[i] = static_cast<float>(acc / channels);
  }
  return w;
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), "write_wav: cannot open " + path.string() + " for writing");
  const std::uint32_t data_len = static_cast<std::uint32_t>(w.samples.size() * sizeof(float));
  os.write("RIFF", 4);
  put_le<std::uint32_t>(os, 36 + data_len);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  put_le<std::uint32_t>(os, 16);
  put_le<std::uint16_t>(os, 3);  // IEEE float
  put_le<std::uint16_t>(os, 1);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate * sizeof(float)));
  put_le<std::uint16_t>(os, sizeof(float));
  put_le<std::uint16_t>(os, 32);
  os.write("data", 4);
  put_le<std::uint32_t>(os, data_len);
  os.write(reinterpret_cast<const char*>(w.samples.data()), data_len);
  require(static_cast<bool>(os), "write_wav: write failed for " + path.string());
}

}  // namespace inmsrl::dsp
