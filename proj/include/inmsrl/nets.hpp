#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "inmsrl/autograd.hpp"
#include "inmsrl/dsp.hpp"
#include "inmsrl/types.hpp"

namespace inmsrl::nets {

using Rng = std::mt19937_64;

inline constexpr int kEmbeddingDim = 128;
inline constexpr int kDisentangledDim = kEmbeddingDim * kNumInstruments;

struct NamedParam {
  std::string name;
  ag::Var var;
};
using ParamList = std::vector<NamedParam>;

/// Fingerprint of parameter names, shapes and values (bit-exact).
std::uint64_t param_hash(const ParamList& params);
void set_trainable(const ParamList& params, bool trainable);
void zero_grad(const ParamList& params);
/// Copies values from `src` into `dst`; names and shapes must agree.
void copy_values(const ParamList& src, const ParamList& dst);
std::size_t param_count(const ParamList& params);

/// Named-tensor archive: magic, count, then per tensor name, shape and
/// float32 little-endian data.
void save_params(const std::filesystem::path& path, const ParamList& params);
void load_params(const std::filesystem::path& path, const ParamList& params);

struct UNetConfig {
  int depth = 6;
  int base_channels = 16;
  int kernel = 5;
  double leaky_slope = 0.2;

  /// Channels per level, doubling from base_channels.
  std::vector<int> channels() const;
  int bottleneck_channels() const { return channels().back(); }
  int min_frames() const { return 1 << depth; }
};

/// Spatial size after `depth` stride-2 convolutions with "same" padding.
int reduced_size(int n, int depth);

/// Stride-2 convolution stack; returns the activation of every level.
class UNetEncoder {
 public:
  UNetEncoder() = default;
  UNetEncoder(const UNetConfig& cfg, int in_channels, Rng& rng);

  std::vector<ag::Var> forward(const ag::Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  std::vector<ag::Var> weights_, biases_;
};

/// Transposed-convolution stack mirroring UNetEncoder. Every level is
/// concatenated with the matching encoder skip; the head is a sigmoid mask.
class UNetDecoder {
 public:
  UNetDecoder() = default;
  UNetDecoder(const UNetConfig& cfg, Rng& rng);

  /// skips are the encoder levels 0..depth-2; returns a [1,out_h,out_w] mask.
  ag::Var forward(const ag::Var& bottleneck, std::span<const ag::Var> skips, int out_h, int out_w) const;
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  UNetConfig cfg_;
  std::vector<ag::Var> weights_, biases_;
};

/// Spectrogram to [1,T,F] tensor (constant) and back.
ag::Var to_var(const dsp::MagnitudeSpectrogram& m);
ag::Var to_var(const dsp::MelSpectrogram& m);
dsp::MagnitudeSpectrogram to_spectrogram(const ag::Var& v, const dsp::MagnitudeSpectrogram& like);

/// Per-instrument separator: log-compressed mix in, sigmoid mask out.
class MSSModel {
 public:
  MSSModel() = default;
  MSSModel(const UNetConfig& cfg, Rng& rng);
  MSSModel(MSSModel&&) = default;
  MSSModel& operator=(MSSModel&&) = default;
  MSSModel(const MSSModel&) = delete;
  MSSModel& operator=(const MSSModel&) = delete;

  struct Output {
    ag::Var mask;
    ag::Var separated;
  };
  /// mix is [1,T,F] magnitude.
  Output forward(const ag::Var& mix) const;
  ParamList params(const std::string& prefix = "mss") const;
  MSSModel clone() const;
  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  UNetEncoder encoder_;
  UNetDecoder decoder_;
};

struct MaskedSeparation {
  dsp::MagnitudeSpectrogram mask;
  dsp::MagnitudeSpectrogram separated;
};
MaskedSeparation mss_forward(const MSSModel& model, const dsp::MagnitudeSpectrogram& mix);

/// Encoder + time average + flatten + fully-connected head.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const UNetConfig& cfg, int input_bins, int out_dim, Rng& rng);
  FeatureExtractor(FeatureExtractor&&) = default;
  FeatureExtractor& operator=(FeatureExtractor&&) = default;
  FeatureExtractor(const FeatureExtractor&) = delete;
  FeatureExtractor& operator=(const FeatureExtractor&) = delete;

  /// x is [1,T,input_bins].
  ag::Var forward(const ag::Var& x) const;
  ParamList params(const std::string& prefix = "extractor") const;
  FeatureExtractor clone() const;
  int input_bins() const { return input_bins_; }
  int out_dim() const { return out_dim_; }
  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  int input_bins_ = 0;
  int out_dim_ = kEmbeddingDim;
  UNetEncoder encoder_;
  ag::Var fc_w_, fc_b_;
};

std::vector<double> extract_feature(const FeatureExtractor& model, const dsp::MelSpectrogram& x);

/// Single encoder over the mix magnitude; the flattened head gives a
/// 5 x 128 vector, one subspace per instrument in canonical order.
class DisentangledExtractor {
 public:
  DisentangledExtractor() = default;
  DisentangledExtractor(const UNetConfig& cfg, int input_bins, Rng& rng, int out_dim = kDisentangledDim);
  DisentangledExtractor(DisentangledExtractor&&) = default;
  DisentangledExtractor& operator=(DisentangledExtractor&&) = default;
  DisentangledExtractor(const DisentangledExtractor&) = delete;
  DisentangledExtractor& operator=(const DisentangledExtractor&) = delete;

  struct Output {
    std::vector<ag::Var> levels;  // encoder activations, bottleneck last
    ag::Var embedding;
  };
  /// mix is [1,T,input_bins] magnitude (log-compressed internally).
  Output forward(const ag::Var& mix) const;
  ParamList params(const std::string& prefix = "direct") const;
  DisentangledExtractor clone() const;
  int input_bins() const { return input_bins_; }
  int out_dim() const { return out_dim_; }
  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  int input_bins_ = 0;
  int out_dim_ = kDisentangledDim;
  UNetEncoder encoder_;
  ag::Var fc_w_, fc_b_;
};

struct DisentangledOutput {
  std::vector<ag::Var> sequence;
  std::vector<double> embedding;
};
DisentangledOutput extract_disentangled(const DisentangledExtractor& model,
                                        const dsp::MagnitudeSpectrogram& x);

class ReconstructionDecoder {
 public:
  ReconstructionDecoder() = default;
  ReconstructionDecoder(const UNetConfig& cfg, Rng& rng);
  ReconstructionDecoder(ReconstructionDecoder&&) = default;
  ReconstructionDecoder& operator=(ReconstructionDecoder&&) = default;
  ReconstructionDecoder(const ReconstructionDecoder&) = delete;
  ReconstructionDecoder& operator=(const ReconstructionDecoder&) = delete;

  ag::Var mask(const ag::Var& bottleneck, std::span<const ag::Var> skips, int out_h, int out_w) const;
  ParamList params(const std::string& prefix = "decoder") const;
  ReconstructionDecoder clone() const;

 private:
  UNetConfig cfg_;
  UNetDecoder decoder_;
};

/// mask(conditioned bottleneck, skips) applied to the mix; levels are the
/// extractor's encoder outputs with the bottleneck last.
ag::Var reconstruct(const ReconstructionDecoder& decoder, const ag::Var& conditioned_bottleneck,
                    std::span<const ag::Var> skips, const ag::Var& mix);

/// [lo, hi) of instrument i inside a vector of `dim` components.
std::pair<int, int> subspace(int dim, Instrument i);

/// Keeps instrument i's subspace, zeroes the rest.
ag::Var conditioning_1d(const ag::Var& v, Instrument i);
std::vector<double> conditioning_1d(std::span<const double> v, Instrument i);

/// Zeroes every channel group of a [C,T,F] sequence except instrument i's.
ag::Var conditioning_3d(const ag::Var& seq, Instrument i);

/// Fixed mel projection followed by log(x + floor); not trainable.
class MelFrontEnd {
 public:
  MelFrontEnd() = default;
  MelFrontEnd(int bins, int n_mels, int sample_rate);

  ag::Var forward(const ag::Var& magnitude) const;
  int n_mels() const { return fb_.n_mels; }
  int bins() const { return fb_.bins; }

 private:
  dsp::MelFilterbank fb_;
};

}  // namespace inmsrl::nets
