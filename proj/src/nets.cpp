#include "inmsrl/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace inmsrl::nets {

namespace {

ag::Var uniform_param(ag::Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(ag::numel(shape));
  for (double& x : v) x = u(rng);
  return ag::Var::parameter(std::move(shape), std::move(v));
}

constexpr char kMagic[8] = {'I', 'N', 'M', 'S', 'R', 'L', 'P', '1'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(is), "load_params: truncated archive " + path.string());
  return v;
}

}  // namespace

std::uint64_t param_hash(const ParamList& params) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& p : params) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.var.shape().data(), p.var.shape().size() * sizeof(int), h);
    h = fnv1a(p.var.value().data(), p.var.size() * sizeof(double), h);
  }
  return h;
}

void set_trainable(const ParamList& params, bool trainable) {
  for (const auto& p : params) {
    ag::Var v = p.var;
    v.set_requires_grad(trainable);
  }
}

void zero_grad(const ParamList& params) {
  for (const auto& p : params) {
    ag::Var v = p.var;
    v.zero_grad();
  }
}

void copy_values(const ParamList& src, const ParamList& dst) {
  require(src.size() == dst.size(), "copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    require(src[i].name == dst[i].name && src[i].var.shape() == dst[i].var.shape(),
            "copy_values: parameter '" + src[i].name + "' does not match '" + dst[i].name + "'");
    ag::Var d = dst[i].var;
    auto& v = d.mutable_value();
    std::copy(src[i].var.value().begin(), src[i].var.value().end(), v.begin());
  }
}

std::size_t param_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.size();
  return n;
}

void save_params(const std::filesystem::path& path, const ParamList& params) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), "save_params: cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.var.shape().size()));
    for (int d : p.var.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : p.var.value()) put<float>(os, static_cast<float>(v));
  }
  require(static_cast<bool>(os), "save_params: write failed for " + path.string());
}

void load_params(const std::filesystem::path& path, const ParamList& params) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "load_params: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  require(is && std::memcmp(magic, kMagic, sizeof kMagic) == 0,
          "load_params: " + path.string() + " is not a parameter archive");
  const auto count = get<std::uint32_t>(is, path);
  require(count == params.size(), "load_params: archive has " + std::to_string(count) +
                                      " tensors, model expects " + std::to_string(params.size()));
  for (const auto& p : params) {
    const auto len = get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    is.read(name.data(), len);
    require(name == p.name, "load_params: expected tensor '" + p.name + "', found '" + name + "'");
    const auto rank = get<std::uint32_t>(is, path);
    ag::Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(get<std::uint32_t>(is, path));
    require(shape == p.var.shape(), "load_params: shape mismatch for '" + p.name + "'");
    ag::Var v = p.var;
    for (double& x : v.mutable_value()) x = get<float>(is, path);
  }
}

// ---------------------------------------------------------------------------

std::vector<int> UNetConfig::channels() const {
  std::vector<int> c(depth);
  for (int i = 0; i < depth; ++i) c[i] = base_channels << i;
  return c;
}

int reduced_size(int n, int depth) {
  for (int i = 0; i < depth; ++i) n = (n + 1) / 2;
  return n;
}

UNetEncoder::UNetEncoder(const UNetConfig& cfg, int in_channels, Rng& rng) : cfg_(cfg) {
  require(cfg.depth >= 1 && cfg.base_channels >= 1 && cfg.kernel % 2 == 1,
          "UNetEncoder: depth and channels must be positive and the kernel odd");
  int cin = in_channels;
  for (int c : cfg.channels()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * cfg.kernel * cfg.kernel));
    weights_.push_back(uniform_param({c, cin, cfg.kernel, cfg.kernel}, bound, rng));
    biases_.push_back(uniform_param({c}, bound, rng));
    cin = c;
  }
}

std::vector<ag::Var> UNetEncoder::forward(const ag::Var& x) const {
  std::vector<ag::Var> levels;
  ag::Var h = x;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    h = ag::leaky_relu(ag::conv2d(h, weights_[i], biases_[i], 2, cfg_.kernel / 2), cfg_.leaky_slope);
    levels.push_back(h);
  }
  return levels;
}

void UNetEncoder::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back({prefix + ".conv" + std::to_string(i) + ".weight", weights_[i]});
    out.push_back({prefix + ".conv" + std::to_string(i) + ".bias", biases_[i]});
  }
}

UNetDecoder::UNetDecoder(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  const auto ch = cfg.channels();
  const int k = cfg.kernel;
  // Level j maps to the resolution of encoder level j-1 (or the input for j == 0).
  for (int j = cfg.depth - 1; j >= 0; --j) {
    const int cin = (j == cfg.depth - 1) ? ch[j] : 2 * ch[j];
    const int cout = j == 0 ? 1 : ch[j - 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    weights_.push_back(uniform_param({cin, cout, k, k}, bound, rng));
    biases_.push_back(uniform_param({cout}, bound, rng));
  }
}

ag::Var UNetDecoder::forward(const ag::Var& bottleneck, std::span<const ag::Var> skips, int out_h,
                             int out_w) const {
  require(static_cast<int>(skips.size()) == cfg_.depth - 1,
          "UNetDecoder: expected " + std::to_string(cfg_.depth - 1) + " skip connections");
  ag::Var h = bottleneck;
  for (std::size_t s = 0; s < weights_.size(); ++s) {
    const int j = cfg_.depth - 1 - static_cast<int>(s);
    if (j == 0) return ag::sigmoid(ag::conv_transpose2d(h, weights_[s], biases_[s], 2, cfg_.kernel / 2, out_h, out_w));
    const ag::Var& skip = skips[j - 1];
    ag::Var up = ag::relu(
        ag::conv_transpose2d(h, weights_[s], biases_[s], 2, cfg_.kernel / 2, skip.dim(1), skip.dim(2)));
    h = ag::concat_channels(up, skip);
  }
  return h;  // unreachable: the loop always ends at level 0
}

void UNetDecoder::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back({prefix + ".deconv" + std::to_string(i) + ".weight", weights_[i]});
    out.push_back({prefix + ".deconv" + std::to_string(i) + ".bias", biases_[i]});
  }
}

ag::Var to_var(const dsp::MagnitudeSpectrogram& m) {
  return ag::Var::constant({1, m.frames, m.bins}, m.data);
}

ag::Var to_var(const dsp::MelSpectrogram& m) { return ag::Var::constant({1, m.frames, m.n_mels}, m.data); }

dsp::MagnitudeSpectrogram to_spectrogram(const ag::Var& v, const dsp::MagnitudeSpectrogram& like) {
  require(v.size() == like.data.size(), "to_spectrogram: size mismatch");
  dsp::MagnitudeSpectrogram out = like;
  std::copy(v.value().begin(), v.value().end(), out.data.begin());
  return out;
}

namespace {

void check_input(const ag::Var& x, int bins, const UNetConfig& cfg, const char* who) {
  require(x.shape().size() == 3 && x.dim(0) == 1, std::string(who) + ": expects a [1,T,F] input");
  require(bins == 0 || x.dim(2) == bins, std::string(who) + ": expected " + std::to_string(bins) +
                                             " bins, got " + std::to_string(x.dim(2)));
  require(x.dim(1) >= cfg.min_frames(), std::string(who) + ": " + std::to_string(x.dim(1)) +
                                            " frames is below the minimum of " +
                                            std::to_string(cfg.min_frames()));
}

std::span<const ag::Var> skips_of(const std::vector<ag::Var>& levels) {
  return std::span<const ag::Var>(levels.data(), levels.size() - 1);
}

}  // namespace

MSSModel::MSSModel(const UNetConfig& cfg, Rng& rng)
    : cfg_(cfg), encoder_(cfg, 1, rng), decoder_(cfg, rng) {}

MSSModel::Output MSSModel::forward(const ag::Var& mix) const {
  check_input(mix, 0, cfg_, "mss_forward");
  const auto levels = encoder_.forward(ag::log1p(mix));
  ag::Var mask = decoder_.forward(levels.back(), skips_of(levels), mix.dim(1), mix.dim(2));
  return {mask, ag::mul(mask, mix)};
}

ParamList MSSModel::params(const std::string& prefix) const {
  ParamList out;
  encoder_.collect(prefix + ".enc", out);
  decoder_.collect(prefix + ".dec", out);
  return out;
}

MSSModel MSSModel::clone() const {
  Rng rng(0);
  MSSModel m(cfg_, rng);
  copy_values(params(), m.params());
  return m;
}

MaskedSeparation mss_forward(const MSSModel& model, const dsp::MagnitudeSpectrogram& mix) {
  const auto out = model.forward(to_var(mix));
  return {to_spectrogram(out.mask, mix), to_spectrogram(out.separated, mix)};
}

FeatureExtractor::FeatureExtractor(const UNetConfig& cfg, int input_bins, int out_dim, Rng& rng)
    : cfg_(cfg), input_bins_(input_bins), out_dim_(out_dim), encoder_(cfg, 1, rng) {
  const int in = cfg.bottleneck_channels() * reduced_size(input_bins, cfg.depth);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  fc_w_ = uniform_param({out_dim, in}, bound, rng);
  fc_b_ = uniform_param({out_dim}, bound, rng);
}

ag::Var FeatureExtractor::forward(const ag::Var& x) const {
  check_input(x, input_bins_, cfg_, "extract_feature");
  const auto levels = encoder_.forward(x);
  return ag::linear(ag::time_mean_flatten(levels.back()), fc_w_, fc_b_);
}

ParamList FeatureExtractor::params(const std::string& prefix) const {
  ParamList out;
  encoder_.collect(prefix + ".enc", out);
  out.push_back({prefix + ".fc.weight", fc_w_});
  out.push_back({prefix + ".fc.bias", fc_b_});
  return out;
}

FeatureExtractor FeatureExtractor::clone() const {
  Rng rng(0);
  FeatureExtractor m(cfg_, input_bins_, out_dim_, rng);
  copy_values(params(), m.params());
  return m;
}

std::vector<double> extract_feature(const FeatureExtractor& model, const dsp::MelSpectrogram& x) {
  const ag::Var v = model.forward(to_var(x));
  return {v.value().begin(), v.value().end()};
}

DisentangledExtractor::DisentangledExtractor(const UNetConfig& cfg, int input_bins, Rng& rng, int out_dim)
    : cfg_(cfg), input_bins_(input_bins), out_dim_(out_dim), encoder_(cfg, 1, rng) {
  require(out_dim % kNumInstruments == 0, "DisentangledExtractor: output size must split into 5 subspaces");
  const int in = cfg.bottleneck_channels() * reduced_size(input_bins, cfg.depth);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  fc_w_ = uniform_param({out_dim, in}, bound, rng);
  fc_b_ = uniform_param({out_dim}, bound, rng);
}

DisentangledExtractor::Output DisentangledExtractor::forward(const ag::Var& mix) const {
  check_input(mix, input_bins_, cfg_, "extract_disentangled");
  Output out;
  out.levels = encoder_.forward(ag::log1p(mix));
  out.embedding = ag::linear(ag::time_mean_flatten(out.levels.back()), fc_w_, fc_b_);
  return out;
}

ParamList DisentangledExtractor::params(const std::string& prefix) const {
  ParamList out;
  encoder_.collect(prefix + ".enc", out);
  out.push_back({prefix + ".fc.weight", fc_w_});
  out.push_back({prefix + ".fc.bias", fc_b_});
  return out;
}

DisentangledExtractor DisentangledExtractor::clone() const {
  Rng rng(0);
  DisentangledExtractor m(cfg_, input_bins_, rng, out_dim_);
  copy_values(params(), m.params());
  return m;
}

DisentangledOutput extract_disentangled(const DisentangledExtractor& model, const dsp::MagnitudeSpectrogram& x) {
  auto out = model.forward(to_var(x));
  return {std::move(out.levels), {out.embedding.value().begin(), out.embedding.value().end()}};
}

ReconstructionDecoder::ReconstructionDecoder(const UNetConfig& cfg, Rng& rng) : cfg_(cfg), decoder_(cfg, rng) {}

ag::Var ReconstructionDecoder::mask(const ag::Var& bottleneck, std::span<const ag::Var> skips, int out_h,
                                    int out_w) const {
  return decoder_.forward(bottleneck, skips, out_h, out_w);
}

ParamList ReconstructionDecoder::params(const std::string& prefix) const {
  ParamList out;
  decoder_.collect(prefix, out);
  return out;
}

ReconstructionDecoder ReconstructionDecoder::clone() const {
  Rng rng(0);
  ReconstructionDecoder m(cfg_, rng);
  copy_values(params(), m.params());
  return m;
}

ag::Var reconstruct(const ReconstructionDecoder& decoder, const ag::Var& conditioned_bottleneck,
                    std::span<const ag::Var> skips, const ag::Var& mix) {
  require(mix.shape().size() == 3 && mix.dim(0) == 1, "reconstruct: mix must be [1,T,F]");
  const ag::Var m = decoder.mask(conditioned_bottleneck, skips, mix.dim(1), mix.dim(2));
  return ag::mul(m, mix);
}

std::pair<int, int> subspace(int dim, Instrument i) {
  require(dim % kNumInstruments == 0, "subspace: dimension " + std::to_string(dim) + " is not divisible by 5");
  const int w = dim / kNumInstruments;
  return {w * index_of(i), w * (index_of(i) + 1)};
}

namespace {

void check_instrument(Instrument i) {
  require(index_of(i) >= 0 && index_of(i) < kNumInstruments,
          "conditioning: unknown instrument index " + std::to_string(index_of(i)));
}

}  // namespace

ag::Var conditioning_1d(const ag::Var& v, Instrument i) {
  check_instrument(i);
  const auto [lo, hi] = subspace(static_cast<int>(v.size()), i);
  std::vector<double> mask(v.size(), 0.0);
  std::fill(mask.begin() + lo, mask.begin() + hi, 1.0);
  return ag::mul_const(v, mask);
}

std::vector<double> conditioning_1d(std::span<const double> v, Instrument i) {
  check_instrument(i);
  const auto [lo, hi] = subspace(static_cast<int>(v.size()), i);
  std::vector<double> out(v.size(), 0.0);
  std::copy(v.begin() + lo, v.begin() + hi, out.begin() + lo);
  return out;
}

ag::Var conditioning_3d(const ag::Var& seq, Instrument i) {
  check_instrument(i);
  require(seq.shape().size() == 3, "conditioning_3d: expects a [C,T,F] sequence");
  const int C = seq.dim(0);
  require(C % kNumInstruments == 0,
          "conditioning_3d: " + std::to_string(C) + " channels cannot be split into 5 groups");
  const auto [lo, hi] = subspace(C, i);
  const std::size_t plane = static_cast<std::size_t>(seq.dim(1)) * seq.dim(2);
  std::vector<double> mask(seq.size(), 0.0);
  std::fill(mask.begin() + lo * plane, mask.begin() + hi * plane, 1.0);
  return ag::mul_const(seq, mask);
}

MelFrontEnd::MelFrontEnd(int bins, int n_mels, int sample_rate)
    : fb_(dsp::mel_filterbank(bins, n_mels, sample_rate)) {}

ag::Var MelFrontEnd::forward(const ag::Var& magnitude) const {
  require(magnitude.shape().back() == fb_.bins, "MelFrontEnd: bin count mismatch");
  return ag::log_eps(ag::project_last_axis(magnitude, fb_.weights, fb_.n_mels), dsp::kLogFloor);
}

}  // namespace inmsrl::nets
