#include "inmsrl/training.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <numeric>

namespace inmsrl::training {

using corpus::Rng;
using corpus::Triplet;
using Components = std::map<std::string, double>;

ModelConfig desk_model_config() {
  ModelConfig c;
  c.spectral = {8000, 256, 64, 64};
  c.mss = {3, 8};
  c.extractor = {3, 8};
  c.direct = {3, 10};
  return c;
}

namespace {

constexpr std::pair<Regime, std::string_view> kRegimeNames[] = {
    {Regime::mss, "mss"},
    {Regime::clean, "clean"},
    {Regime::cascade, "cascade"},
    {Regime::cascade_ft, "cascade_ft"},
    {Regime::cascade_paft, "cascade_paft"},
    {Regime::direct_pretrain, "direct_pretrain"},
    {Regime::direct_multitask, "direct_multitask"},
    {Regime::paft, "paft"},
};

}  // namespace

std::string_view to_string(Regime r) {
  for (const auto& [k, v] : kRegimeNames)
    if (k == r) return v;
  throw Error("unknown regime");
}

Regime regime_from_string(std::string_view s) {
  for (const auto& [k, v] : kRegimeNames)
    if (v == s) return k;
  throw Error("unknown regime: " + std::string(s));
}

double default_lr(Regime r) {
  switch (r) {
    case Regime::cascade_ft: return 1e-5;
    case Regime::direct_pretrain:
    case Regime::direct_multitask: return 1e-4;
    case Regime::mss: return 1e-4;
    default: return 5e-5;
  }
}

TrainPlan default_plan(Regime r) {
  TrainPlan p;
  p.regime = r;
  p.lr = default_lr(r);
  return p;
}

void validate(const TrainPlan& p) {
  require(p.lr > 0.0, "plan: lr must be > 0");
  require(p.patience >= 1, "plan: patience must be >= 1");
  require(p.patience <= p.max_epochs, "plan: patience must not exceed max_epochs");
  require(p.max_epochs >= 1 && p.paft_epochs >= 1, "plan: epoch counts must be >= 1");
  require(p.batch_size >= 1 && p.steps_per_epoch >= 1 && p.val_examples >= 1, "plan: sizes must be >= 1");
  require(p.lambda_sep >= 0.0 && p.lambda_rec >= 0.0, "plan: loss weights must be >= 0");
  require(p.margin >= 0.0, "plan: margin must be >= 0");
  require(p.segment_s > 0.0, "plan: segment_s must be > 0");
}

// ---------------------------------------------------------------------------

double triplet_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n,
                    double margin) {
  require(a.size() == p.size() && a.size() == n.size(), "triplet_loss: dimension mismatch");
  double dp = 0.0, dn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dp += (a[i] - p[i]) * (a[i] - p[i]);
    dn += (a[i] - n[i]) * (a[i] - n[i]);
  }
  return std::max(0.0, std::sqrt(dp) - std::sqrt(dn) + margin);
}

ag::Var triplet_loss(const ag::Var& a, const ag::Var& p, const ag::Var& n, double margin) {
  require(a.size() == p.size() && a.size() == n.size(), "triplet_loss: dimension mismatch");
  return ag::hinge(ag::add_scalar(ag::sub(ag::l2_distance(a, p), ag::l2_distance(a, n)), margin));
}

double l1_loss(const dsp::MagnitudeSpectrogram& x, const dsp::MagnitudeSpectrogram& y) {
  require(x.frames == y.frames && x.bins == y.bins && x.data.size() == y.data.size(),
          "l1_loss: shape mismatch");
  require(!x.data.empty(), "l1_loss: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) s += std::abs(x.data[i] - y.data[i]);
  return s / static_cast<double>(x.data.size());
}

double mse_loss(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "mse_loss: shape mismatch");
  require(!x.empty(), "mse_loss: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

StopDecision early_stopper(std::span<const double> history, int patience) {
  require(!history.empty(), "early_stopper: empty history");
  require(patience >= 1, "early_stopper: patience must be >= 1");
  const auto best = std::min_element(history.begin(), history.end());
  StopDecision d;
  d.best_epoch = static_cast<int>(best - history.begin());
  const int current = static_cast<int>(history.size()) - 1;
  d.stop = current - d.best_epoch >= patience;
  return d;
}

// ---------------------------------------------------------------------------

Adam::Adam(nets::ParamList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  require(lr > 0.0, "Adam: lr must be > 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.var.size(), 0.0);
    v_.emplace_back(p.var.size(), 0.0);
  }
}

void Adam::zero_grad() { nets::zero_grad(params_); }

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ag::Var v = params_[k].var;
    if (!v.requires_grad() || v.grad().size() != v.size()) continue;
    auto& val = v.mutable_value();
    const auto& g = v.grad();
    auto& m = m_[k];
    auto& s = v_[k];
    for (std::size_t i = 0; i < val.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      s[i] = beta2_ * s[i] + (1.0 - beta2_) * g[i] * g[i];
      val[i] -= lr_ * (m[i] / c1) / (std::sqrt(s[i] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------

dsp::MagnitudeSpectrogram spectrogram(const SpectralConfig& c, const dsp::Waveform& w) {
  require(w.sample_rate == c.sample_rate, "spectrogram: sample rate differs from the model configuration");
  return dsp::magnitude(dsp::stft(w, c.window, c.hop));
}

namespace {

template <class M>
void append_params(nets::ParamList& out, const std::map<Instrument, M>& models, const std::string& prefix) {
  for (const auto& [inst, m] : models) {
    auto p = m.params(prefix + "." + std::string(to_string(inst)));
    out.insert(out.end(), p.begin(), p.end());
  }
}

template <class M>
std::map<Instrument, M> clone_map(const std::map<Instrument, M>& in) {
  std::map<Instrument, M> out;
  for (const auto& [k, v] : in) out.emplace(k, v.clone());
  return out;
}

}  // namespace

nets::ParamList CleanModel::params() const {
  nets::ParamList out;
  append_params(out, extractors, "clean");
  return out;
}

CleanModel CleanModel::clone() const { return {clone_map(extractors), mel}; }

nets::ParamList CascadeModel::mss_params() const {
  nets::ParamList out;
  append_params(out, mss, "mss");
  return out;
}

nets::ParamList CascadeModel::extractor_params() const {
  nets::ParamList out;
  append_params(out, extractors, "extractor");
  return out;
}

nets::ParamList CascadeModel::params() const {
  auto out = mss_params();
  auto e = extractor_params();
  out.insert(out.end(), e.begin(), e.end());
  return out;
}

CascadeModel CascadeModel::clone() const { return {clone_map(mss), clone_map(extractors), mel}; }

nets::ParamList DirectModel::decoder_params() const {
  nets::ParamList out;
  append_params(out, decoders, "decoder");
  return out;
}

nets::ParamList DirectModel::params() const {
  auto out = extractor_params();
  auto d = decoder_params();
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

DirectModel DirectModel::clone() const { return {extractor.clone(), clone_map(decoders)}; }

namespace {

Rng model_rng(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  return Rng(seq);
}

}  // namespace

CleanModel make_clean_model(const ModelConfig& c, std::span<const Instrument> instruments, std::uint64_t seed) {
  require(!instruments.empty(), "make_clean_model: no instruments");
  CleanModel m;
  m.mel = nets::MelFrontEnd(c.spectral.bins(), c.spectral.n_mels, c.spectral.sample_rate);
  for (Instrument i : instruments) {
    Rng rng = model_rng(seed, 100 + index_of(i));
    m.extractors.emplace(i, nets::FeatureExtractor(c.extractor, c.spectral.n_mels, c.embed_dim, rng));
  }
  return m;
}

CascadeModel make_cascade_model(const ModelConfig& c, std::span<const Instrument> instruments,
                                std::uint64_t seed) {
  require(!instruments.empty(), "make_cascade_model: no instruments");
  CascadeModel m;
  m.mel = nets::MelFrontEnd(c.spectral.bins(), c.spectral.n_mels, c.spectral.sample_rate);
  for (Instrument i : instruments) {
    Rng rs = model_rng(seed, 200 + index_of(i));
    m.mss.emplace(i, nets::MSSModel(c.mss, rs));
    Rng re = model_rng(seed, 300 + index_of(i));
    m.extractors.emplace(i, nets::FeatureExtractor(c.extractor, c.spectral.n_mels, c.embed_dim, re));
  }
  return m;
}

DirectModel make_direct_model(const ModelConfig& c, std::uint64_t seed) {
  require(c.direct.bottleneck_channels() % kNumInstruments == 0,
          "make_direct_model: bottleneck channels must be divisible by 5");
  Rng re = model_rng(seed, 400);
  DirectModel m{nets::DisentangledExtractor(c.direct, c.spectral.bins(), re, c.embed_dim * kNumInstruments), {}};
  for (Instrument i : kAllInstruments) {
    Rng rd = model_rng(seed, 500 + index_of(i));
    m.decoders.emplace(i, nets::ReconstructionDecoder(c.direct, rd));
  }
  return m;
}

namespace {

const nets::FeatureExtractor& extractor_for(const std::map<Instrument, nets::FeatureExtractor>& m, Instrument i) {
  auto it = m.find(i);
  require(it != m.end(), "no feature extractor for " + std::string(to_string(i)));
  return it->second;
}

const nets::MSSModel& mss_for(const CascadeModel& m, Instrument i) {
  auto it = m.mss.find(i);
  require(it != m.mss.end(), "no MSS model for " + std::string(to_string(i)));
  return it->second;
}

ag::Var mag_var(const SpectralConfig& c, const dsp::Waveform& w) { return nets::to_var(spectrogram(c, w)); }

ag::Var clean_embedding(const CleanModel& m, const SpectralConfig& c, const dsp::Waveform& stem, Instrument i) {
  return extractor_for(m.extractors, i).forward(m.mel.forward(mag_var(c, stem)));
}

struct CascadeForward {
  ag::Var embedding;
  ag::Var separated;
};

CascadeForward cascade_forward(const CascadeModel& m, const ag::Var& mix, Instrument i) {
  const auto sep = mss_for(m, i).forward(mix);
  return {extractor_for(m.extractors, i).forward(m.mel.forward(sep.separated)), sep.separated};
}

std::vector<double> values(const ag::Var& v) { return {v.value().begin(), v.value().end()}; }

}  // namespace

std::vector<double> CleanEmbedder::embed(const corpus::StemSet& s, Instrument target) const {
  return values(clean_embedding(m_, c_, s.stem(target), target));
}

std::vector<double> CascadeEmbedder::embed(const corpus::StemSet& s, Instrument target) const {
  return values(cascade_forward(m_, mag_var(c_, s.mix), target).embedding);
}

std::vector<double> DirectEmbedder::embed(const corpus::StemSet& s, Instrument) const {
  return values(m_.extractor.forward(mag_var(c_, s.mix)).embedding);
}

// ---------------------------------------------------------------------------

LossTerms clean_triplet_terms(const CleanModel& m, const Triplet& t, const SpectralConfig& c, double margin) {
  const Instrument i = t.target;
  const auto a = clean_embedding(m, c, t.anchor.audio.stem(i), i);
  const auto p = clean_embedding(m, c, t.positive.audio.stem(i), i);
  const auto n = clean_embedding(m, c, t.negative.audio.stem(i), i);
  LossTerms out;
  out.total = triplet_loss(a, p, n, margin);
  out.triplet = out.total.item();
  return out;
}

LossTerms cascade_triplet_terms(const CascadeModel& m, const Triplet& t, const SpectralConfig& c, double margin,
                                double lambda_sep) {
  const Instrument i = t.target;
  const corpus::Example* members[3] = {&t.anchor, &t.positive, &t.negative};
  CascadeForward f[3];
  for (int k = 0; k < 3; ++k) f[k] = cascade_forward(m, mag_var(c, members[k]->audio.mix), i);
  LossTerms out;
  out.total = triplet_loss(f[0].embedding, f[1].embedding, f[2].embedding, margin);
  out.triplet = out.total.item();
  if (lambda_sep > 0.0) {
    ag::Var sep;
    for (int k = 0; k < 3; ++k) {
      const ag::Var target = mag_var(c, members[k]->audio.scaled_stem(i));
      const ag::Var l = ag::l1_mean(f[k].separated, target);
      sep = sep.defined() ? ag::add(sep, l) : l;
      ++out.separation_evals;
    }
    sep = ag::scale(sep, 1.0 / 3.0);
    out.separation = sep.item();
    out.total = ag::add(out.total, ag::scale(sep, lambda_sep));
  }
  return out;
}

LossTerms direct_triplet_terms(const DirectModel& m, const Triplet& t, const SpectralConfig& c, double margin,
                               double lambda_rec, corpus::CombinationPattern pattern) {
  const Instrument i = t.target;
  const auto a = nets::conditioning_1d(m.extractor.forward(mag_var(c, t.anchor.audio.mix)).embedding, i);
  const auto p = nets::conditioning_1d(m.extractor.forward(mag_var(c, t.positive.audio.mix)).embedding, i);
  const auto n = nets::conditioning_1d(m.extractor.forward(mag_var(c, t.negative.audio.mix)).embedding, i);
  LossTerms out;
  out.total = triplet_loss(a, p, n, margin);
  out.triplet = out.total.item();
  if (lambda_rec > 0.0) {
    require(pattern.bits != 0, "direct_triplet_terms: empty combination pattern");
    const ag::Var mix = mag_var(c, corpus::combination_mix(t.anchor.audio, pattern));
    const auto fwd = m.extractor.forward(mix);
    const ag::Var& bottleneck = fwd.levels.back();
    const std::span<const ag::Var> skips(fwd.levels.data(), fwd.levels.size() - 1);
    ag::Var rec;
    for (Instrument j : kAllInstruments) {
      if (!pattern.has(j)) continue;
      auto dec = m.decoders.find(j);
      require(dec != m.decoders.end(), "direct_triplet_terms: missing decoder");
      const ag::Var est = nets::reconstruct(dec->second, nets::conditioning_3d(bottleneck, j), skips, mix);
      const ag::Var l = ag::l1_mean(est, mag_var(c, t.anchor.audio.scaled_stem(j)));
      rec = rec.defined() ? ag::add(rec, l) : l;
    }
    out.reconstruction = rec.item();
    out.total = ag::add(out.total, ag::scale(rec, lambda_rec));
  }
  return out;
}

std::vector<double> pretrain_target(const CleanModel& clean, const corpus::StemSet& s,
                                    corpus::CombinationPattern pattern, const SpectralConfig& c) {
  require(pattern.bits != 0 && pattern.bits <= 0x1f, "pretrain_target: invalid combination pattern");
  std::vector<double> out;
  for (Instrument i : kAllInstruments) {
    const auto& ext = extractor_for(clean.extractors, i);
    if (pattern.has(i)) {
      const auto v = clean_embedding(clean, c, s.stem(i), i);
      out.insert(out.end(), v.value().begin(), v.value().end());
    } else {
      out.insert(out.end(), static_cast<std::size_t>(ext.out_dim()), 0.0);
    }
  }
  return out;
}

ag::Var pretrain_loss(const DirectModel& m, const corpus::StemSet& s, corpus::CombinationPattern pattern,
                      std::span<const double> target, const SpectralConfig& c) {
  const auto emb = m.extractor.forward(mag_var(c, corpus::combination_mix(s, pattern))).embedding;
  require(emb.size() == target.size(), "pretrain_loss: target dimension mismatch");
  return ag::mse_mean(emb, ag::Var::constant(emb.shape(), {target.begin(), target.end()}));
}

// ---------------------------------------------------------------------------

MetricsLog::MetricsLog(std::filesystem::path path, bool timestamps)
    : path_(std::move(path)), timestamps_(timestamps) {}

void MetricsLog::append(const std::string& stage, int epoch, const std::string& split, const Components& losses) {
  nlohmann::json j{{"stage", stage}, {"epoch", epoch}, {"split", split}, {"losses", losses}};
  if (timestamps_) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    j["timestamp"] = buf;
  }
  if (path_) {
    std::ofstream os(*path_, std::ios::app);
    require(static_cast<bool>(os), "cannot open metrics log " + path_->string());
    os << j.dump() << '\n';
  }
  records_.push_back(std::move(j));
}

double TrainReport::best_val_loss() const {
  if (best_epoch < 0) return initial_val_loss;
  if (best_epoch == 0) return initial_val_loss;
  return val_losses.at(static_cast<std::size_t>(best_epoch - 1));
}

std::pair<corpus::Corpus, corpus::Corpus> split_corpus(const corpus::Corpus& c, std::uint64_t seed) {
  const int n = static_cast<int>(c.size());
  const int n_val = std::max(3, static_cast<int>(std::lround(n * 270.0 / 1470.0)));
  require(n - n_val >= 3, "split_corpus: need at least 6 pieces");
  std::vector<std::string> ids;
  for (const auto& p : c.pieces()) ids.push_back(p.id);
  Rng rng = model_rng(seed, 600);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::string> val(ids.begin(), ids.begin() + n_val);
  std::vector<std::string> train(ids.begin() + n_val, ids.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {c.subset(train), c.subset(val)};
}

namespace {

using Snapshot = std::vector<std::vector<double>>;

Snapshot snapshot(const nets::ParamList& ps) {
  Snapshot s;
  for (const auto& p : ps) s.emplace_back(p.var.value().begin(), p.var.value().end());
  return s;
}

void restore(const nets::ParamList& ps, const Snapshot& s) {
  for (std::size_t k = 0; k < ps.size(); ++k) {
    ag::Var v = ps[k].var;
    v.mutable_value() = s[k];
  }
}

/// Disables gradients for the lifetime of the guard, restoring the previous
/// flags afterwards.
class FreezeGuard {
 public:
  explicit FreezeGuard(nets::ParamList ps) : ps_(std::move(ps)) {
    for (auto& p : ps_) {
      flags_.push_back(p.var.requires_grad());
      p.var.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t k = 0; k < ps_.size(); ++k) ps_[k].var.set_requires_grad(flags_[k]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  nets::ParamList ps_;
  std::vector<bool> flags_;
};

void add_terms(Components& c, const LossTerms& t, bool sep, bool rec) {
  c["loss"] += t.total.item();
  c["triplet"] += t.triplet;
  if (sep) c["separation"] += t.separation;
  if (rec) c["reconstruction"] += t.reconstruction;
}

Components averaged(Components c, int n) {
  for (auto& [k, v] : c) v /= n;
  return c;
}

using ItemFn = std::function<LossTerms(std::size_t)>;

/// One optimizer step over `n` items with per-item backward and an ordered
/// reduction of the mean loss.
Components batch_step(Adam& opt, std::size_t n, const ItemFn& item, bool sep, bool rec) {
  opt.zero_grad();
  Components c;
  for (std::size_t b = 0; b < n; ++b) {
    const LossTerms t = item(b);
    ag::backward(t.total, 1.0 / static_cast<double>(n));
    add_terms(c, t, sep, rec);
  }
  opt.step();
  return averaged(std::move(c), static_cast<int>(n));
}

Components evaluate(std::size_t n, const ItemFn& item, const nets::ParamList& ps, bool sep, bool rec) {
  FreezeGuard g(ps);
  Components c;
  for (std::size_t b = 0; b < n; ++b) add_terms(c, item(b), sep, rec);
  return averaged(std::move(c), static_cast<int>(n));
}

struct Loop {
  std::string stage;
  nets::ParamList params;  // snapshot/restore scope
  std::function<Components(Rng&)> train_epoch;
  std::function<Components()> validate;
};

TrainReport run_loop(const TrainPlan& plan, Loop loop, Rng& rng, MetricsLog* log) {
  TrainReport r;
  const Components v0 = loop.validate();
  r.initial_val_loss = v0.at("loss");
  r.initial_components = v0;
  r.best_components = v0;
  r.best_epoch = 0;
  if (log) log->append(loop.stage, 0, "val", v0);
  std::vector<double> history{r.initial_val_loss};
  Snapshot best = snapshot(loop.params);
  for (int epoch = 1; epoch <= plan.max_epochs; ++epoch) {
    const Components tr = loop.train_epoch(rng);
    const Components va = loop.validate();
    r.train_losses.push_back(tr.at("loss"));
    r.val_losses.push_back(va.at("loss"));
    r.epochs_run = epoch;
    if (log) {
      log->append(loop.stage, epoch, "train", tr);
      log->append(loop.stage, epoch, "val", va);
    }
    history.push_back(va.at("loss"));
    const StopDecision d = early_stopper(history, plan.patience);
    if (d.best_epoch == epoch) {
      best = snapshot(loop.params);
      r.best_components = va;
    }
    r.best_epoch = d.best_epoch;
    if (d.stop) {
      r.stopped_early = epoch < plan.max_epochs;
      break;
    }
  }
  restore(loop.params, best);
  return r;
}

std::vector<Instrument> resolve(const TrainPlan& plan, std::span<const Instrument> fallback) {
  if (plan.instruments.empty()) return {fallback.begin(), fallback.end()};
  return plan.instruments;
}

Rng stage_rng(const TrainPlan& plan, std::uint64_t salt) { return model_rng(plan.seed, 1000 + salt); }

void check_data(const TrainData& d, const char* who) {
  require(d.train.size() > 0, std::string(who) + ": empty training corpus");
  require(d.val.size() > 0, std::string(who) + ": empty validation corpus");
}

struct MssItem {
  dsp::MagnitudeSpectrogram mix, target;
};

MssItem sample_mss_item(const corpus::SegmentTable& table, Instrument i, const SpectralConfig& c, Rng& rng) {
  const auto pieces = table.eligible_pieces(i, 1);
  require(!pieces.empty(), "train_mss: no audible segments for " + std::string(to_string(i)));
  const std::size_t p = pieces[std::uniform_int_distribution<std::size_t>(0, pieces.size() - 1)(rng)];
  const auto& aud = table.audible(p, i);
  const int s = aud[std::uniform_int_distribution<std::size_t>(0, aud.size() - 1)(rng)];
  const auto audio = corpus::extract_segment(table.corpus(), table.segments(p)[static_cast<std::size_t>(s)]);
  return {spectrogram(c, audio.mix), spectrogram(c, audio.scaled_stem(i))};
}

LossTerms mss_terms(const nets::MSSModel& m, const MssItem& it) {
  LossTerms t;
  t.total = ag::l1_mean(m.forward(nets::to_var(it.mix)).separated, nets::to_var(it.target));
  t.separation = t.total.item();
  return t;
}

/// Draws `n` training triplets for the given instruments. Pseudo pairs are
/// sampled for any target; the basic member is kept when its target is
/// trained and the additional member when its extra instrument is.
std::vector<Triplet> draw_triplets(const corpus::SegmentTable& table, std::span<const Instrument> insts,
                                   bool pseudo, std::size_t n, Rng& rng, std::map<std::string, long>* counters) {
  const auto trained = [&](Instrument i) { return std::find(insts.begin(), insts.end(), i) != insts.end(); };
  std::vector<Triplet> out;
  while (out.size() < n) {
    if (!pseudo) {
      const Instrument t = insts[std::uniform_int_distribution<std::size_t>(0, insts.size() - 1)(rng)];
      out.push_back(corpus::sample_s4_triplet(table, t, rng));
      if (counters) ++(*counters)["s4"];
      continue;
    }
    const Instrument t = kAllInstruments[std::uniform_int_distribution<std::size_t>(0, kNumInstruments - 1)(rng)];
    auto pair = corpus::sample_pseudo_triplet(table, t, rng);
    if (trained(pair.basic.target)) {
      out.push_back(std::move(pair.basic));
      if (counters) ++(*counters)["basic"];
    }
    if (out.size() < n && trained(pair.additional.target)) {
      out.push_back(std::move(pair.additional));
      if (counters) ++(*counters)["additional"];
    }
  }
  return out;
}

corpus::CombinationPattern draw_pattern(Rng& rng) {
  return {static_cast<std::uint8_t>(std::uniform_int_distribution<int>(1, corpus::kNumCombinationPatterns)(rng))};
}

}  // namespace

std::map<Instrument, TrainReport> train_mss(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                                            CascadeModel& model, MetricsLog* log) {
  validate(plan);
  check_data(data, "train_mss");
  const corpus::SegmentTable train(data.train, plan.segment_s), val(data.val, plan.segment_s);
  std::map<Instrument, TrainReport> out;
  for (Instrument i : resolve(plan, kCascadeInstruments)) {
    auto it = model.mss.find(i);
    require(it != model.mss.end(), "train_mss: model has no separator for " + std::string(to_string(i)));
    nets::MSSModel& mss = it->second;
    const auto ps = mss.params("mss." + std::string(to_string(i)));
    nets::set_trainable(ps, true);

    Rng vrng = stage_rng(plan, 10 + index_of(i));
    std::vector<MssItem> val_items;
    for (int k = 0; k < plan.val_examples; ++k) val_items.push_back(sample_mss_item(val, i, sc, vrng));

    Adam opt(ps, plan.lr);
    Loop loop;
    loop.stage = "mss." + std::string(to_string(i));
    loop.params = ps;
    loop.train_epoch = [&](Rng& rng) {
      Components acc;
      for (int s = 0; s < plan.steps_per_epoch; ++s) {
        std::vector<MssItem> batch;
        for (int b = 0; b < plan.batch_size; ++b) batch.push_back(sample_mss_item(train, i, sc, rng));
        const auto c = batch_step(opt, batch.size(), [&](std::size_t b) { return mss_terms(mss, batch[b]); }, true,
                                  false);
        for (const auto& [k, v] : c) acc[k] += v;
      }
      acc.erase("triplet");
      return averaged(std::move(acc), plan.steps_per_epoch);
    };
    loop.validate = [&] {
      auto c = evaluate(val_items.size(), [&](std::size_t b) { return mss_terms(mss, val_items[b]); }, ps, true,
                        false);
      c.erase("triplet");
      return c;
    };
    Rng rng = stage_rng(plan, 20 + index_of(i));
    out.emplace(i, run_loop(plan, std::move(loop), rng, log));
  }
  return out;
}

namespace {

/// Shared driver for the triplet regimes with regenerated mini-batches.
TrainReport triplet_regime(const TrainPlan& plan, TrainData data, std::span<const Instrument> insts,
                           const std::string& stage, const nets::ParamList& trainable,
                           const nets::ParamList& all, const std::function<LossTerms(const Triplet&, Rng&)>& terms,
                           bool sep, bool rec, MetricsLog* log) {
  const corpus::SegmentTable train(data.train, plan.segment_s), val(data.val, plan.segment_s);
  Rng vrng = stage_rng(plan, 30);
  const auto val_set = draw_triplets(val, insts, plan.pseudo_pieces, static_cast<std::size_t>(plan.val_examples),
                                     vrng, nullptr);
  Rng vpattern = stage_rng(plan, 31);

  std::map<std::string, long> counters;
  Adam opt(trainable, plan.lr);
  Loop loop;
  loop.stage = stage;
  loop.params = all;
  loop.train_epoch = [&](Rng& rng) {
    Components acc;
    for (int s = 0; s < plan.steps_per_epoch; ++s) {
      const auto batch = draw_triplets(train, insts, plan.pseudo_pieces, static_cast<std::size_t>(plan.batch_size),
                                       rng, &counters);
      std::vector<Rng> item_rngs;
      for (std::size_t b = 0; b < batch.size(); ++b) item_rngs.emplace_back(rng());
      const auto c = batch_step(opt, batch.size(), [&](std::size_t b) {
        const LossTerms t = terms(batch[b], item_rngs[b]);
        counters["separation_evals"] += t.separation_evals;
        return t;
      }, sep, rec);
      for (const auto& [k, v] : c) acc[k] += v;
    }
    return averaged(std::move(acc), plan.steps_per_epoch);
  };
  loop.validate = [&] {
    Rng pr = vpattern;
    std::vector<Rng> item_rngs;
    for (std::size_t b = 0; b < val_set.size(); ++b) item_rngs.emplace_back(pr());
    return evaluate(val_set.size(), [&](std::size_t b) { return terms(val_set[b], item_rngs[b]); }, all, sep, rec);
  };
  Rng rng = stage_rng(plan, 40);
  TrainReport r = run_loop(plan, std::move(loop), rng, log);
  r.counters = counters;
  return r;
}

void check_pseudo_val(const TrainPlan& plan, const TrainData& d, const char* who) {
  if (plan.pseudo_pieces)
    require(d.val.size() >= 3 && d.train.size() >= 3,
            std::string(who) + ": pseudo-musical pieces need at least 3 pieces per split");
}

}  // namespace

std::map<Instrument, TrainReport> train_clean(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                                              CleanModel& model, MetricsLog* log) {
  validate(plan);
  check_data(data, "train_clean");
  std::map<Instrument, TrainReport> out;
  for (Instrument i : resolve(plan, kAllInstruments)) {
    auto it = model.extractors.find(i);
    require(it != model.extractors.end(), "train_clean: no extractor for " + std::string(to_string(i)));
    const auto ps = it->second.params("clean." + std::string(to_string(i)));
    nets::set_trainable(ps, true);
    TrainPlan p = plan;
    p.pseudo_pieces = false;
    p.seed = plan.seed + 7919u * static_cast<std::uint64_t>(index_of(i) + 1);
    const Instrument one[] = {i};
    out.emplace(i, triplet_regime(p, data, one, "clean." + std::string(to_string(i)), ps, ps,
                                  [&](const Triplet& t, Rng&) { return clean_triplet_terms(model, t, sc, plan.margin); },
                                  false, false, log));
  }
  return out;
}

TrainReport train_cascade_extractors(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                                     CascadeModel& model, MetricsLog* log) {
  validate(plan);
  check_data(data, "train_cascade_extractors");
  check_pseudo_val(plan, data, "train_cascade_extractors");
  const auto insts = resolve(plan, kCascadeInstruments);
  for (Instrument i : insts) {
    mss_for(model, i);
    extractor_for(model.extractors, i);
  }
  FreezeGuard frozen(model.mss_params());
  const auto ext = model.extractor_params();
  nets::set_trainable(ext, true);
  return triplet_regime(plan, data, insts, "cascade", ext, ext,
                        [&](const Triplet& t, Rng&) { return cascade_triplet_terms(model, t, sc, plan.margin, 0.0); },
                        false, false, log);
}

TrainReport finetune_e2e(const TrainPlan& plan, const SpectralConfig& sc, TrainData data, CascadeModel& model,
                         MetricsLog* log) {
  validate(plan);
  check_data(data, "finetune_e2e");
  check_pseudo_val(plan, data, "finetune_e2e");
  const auto insts = resolve(plan, kCascadeInstruments);
  for (Instrument i : insts) {
    mss_for(model, i);
    extractor_for(model.extractors, i);
  }
  const auto all = model.params();
  nets::set_trainable(all, true);
  return triplet_regime(
      plan, data, insts, "cascade_ft", all, all,
      [&](const Triplet& t, Rng&) { return cascade_triplet_terms(model, t, sc, plan.margin, plan.lambda_sep); },
      plan.lambda_sep > 0.0, false, log);
}

TrainReport pretrain_direct(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                            const CleanModel& clean, DirectModel& model, MetricsLog* log) {
  validate(plan);
  check_data(data, "pretrain_direct");
  for (Instrument i : kAllInstruments)
    require(clean.extractors.count(i) == 1,
            "pretrain_direct: missing Clean extractor for " + std::string(to_string(i)));
  const corpus::SegmentTable train(data.train, plan.segment_s), val(data.val, plan.segment_s);

  struct Item {
    corpus::StemSet audio;
    corpus::CombinationPattern pattern;
    std::vector<double> target;
  };
  const auto sample = [&](const corpus::SegmentTable& table, Rng& rng) {
    const std::size_t p = std::uniform_int_distribution<std::size_t>(0, table.corpus().size() - 1)(rng);
    const auto& segs = table.segments(p);
    require(!segs.empty(), "pretrain_direct: piece shorter than one segment");
    const auto& seg = segs[std::uniform_int_distribution<std::size_t>(0, segs.size() - 1)(rng)];
    Item it{corpus::extract_segment(table.corpus(), seg), draw_pattern(rng), {}};
    it.target = pretrain_target(clean, it.audio, it.pattern, sc);
    return it;
  };
  const auto terms = [&](const Item& it) {
    LossTerms t;
    t.total = pretrain_loss(model, it.audio, it.pattern, it.target, sc);
    return t;
  };

  Rng vrng = stage_rng(plan, 50);
  std::vector<Item> val_items;
  for (int k = 0; k < plan.val_examples; ++k) val_items.push_back(sample(val, vrng));

  const auto ps = model.extractor_params();
  nets::set_trainable(ps, true);
  Adam opt(ps, plan.lr);
  Loop loop;
  loop.stage = "direct_pretrain";
  loop.params = ps;
  loop.train_epoch = [&](Rng& rng) {
    Components acc;
    for (int s = 0; s < plan.steps_per_epoch; ++s) {
      std::vector<Item> batch;
      for (int b = 0; b < plan.batch_size; ++b) batch.push_back(sample(train, rng));
      const auto c = batch_step(opt, batch.size(), [&](std::size_t b) { return terms(batch[b]); }, false, false);
      acc["loss"] += c.at("loss");
    }
    return averaged(std::move(acc), plan.steps_per_epoch);
  };
  loop.validate = [&] {
    auto c = evaluate(val_items.size(), [&](std::size_t b) { return terms(val_items[b]); }, ps, false, false);
    c.erase("triplet");
    return c;
  };
  Rng rng = stage_rng(plan, 51);
  return run_loop(plan, std::move(loop), rng, log);
}

TrainReport train_direct_multitask(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                                   DirectModel& model, MetricsLog* log) {
  validate(plan);
  check_data(data, "train_direct_multitask");
  check_pseudo_val(plan, data, "train_direct_multitask");
  const auto insts = resolve(plan, kAllInstruments);
  const auto all = model.params();
  nets::set_trainable(all, true);
  // The pattern is drawn even when the reconstruction term is off so that
  // both settings see the same triplet stream.
  return triplet_regime(
      plan, data, insts, "direct_multitask", all, all,
      [&](const Triplet& t, Rng& rng) {
        const auto pattern = draw_pattern(rng);
        return direct_triplet_terms(model, t, sc, plan.margin, plan.lambda_rec, pattern);
      },
      false, plan.lambda_rec > 0.0, log);
}

// ---------------------------------------------------------------------------

namespace {

using TripletSet = std::shared_ptr<const std::vector<Triplet>>;

TrainReport paft_loop(const TrainPlan& plan, const PaftSource& source, const nets::ParamList& trainable,
                      const std::function<LossTerms(const TripletSet&, std::size_t)>& terms, bool sep,
                      MetricsLog* log, const std::string& stage) {
  validate(plan);
  require(static_cast<bool>(source), "run_paft: no triplet source");
  Adam opt(trainable, plan.lr);
  Rng rng = stage_rng(plan, 60);
  std::vector<std::size_t> order;
  TrainReport r;
  r.best_epoch = -1;
  for (int epoch = 1; epoch <= plan.paft_epochs; ++epoch) {
    const TripletSet set = source(epoch);
    require(set && !set->empty(), "run_paft: no training triplets");
    if (order.size() != set->size()) {
      order.resize(set->size());
      std::iota(order.begin(), order.end(), std::size_t{0});
    }
    std::shuffle(order.begin(), order.end(), rng);
    Components acc;
    int steps = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(plan.batch_size)) {
      const std::size_t n = std::min(order.size() - lo, static_cast<std::size_t>(plan.batch_size));
      const auto c = batch_step(opt, n, [&](std::size_t b) {
        const LossTerms t = terms(set, order[lo + b]);
        r.counters["separation_evals"] += t.separation_evals;
        return t;
      }, sep, false);
      for (const auto& [k, v] : c) acc[k] += v;
      ++steps;
    }
    acc = averaged(std::move(acc), steps);
    r.train_losses.push_back(acc.at("loss"));
    r.epochs_run = epoch;
    if (log) log->append(stage, epoch, "train", acc);
  }
  return r;
}

}  // namespace

PaftSource fixed_triplets(std::vector<Triplet> triplets) {
  auto set = std::make_shared<const std::vector<Triplet>>(std::move(triplets));
  return [set](int) { return set; };
}

PaftSource redrawn_triplets(std::vector<ABXRecord> records, std::vector<Instrument> instruments,
                            std::shared_ptr<const corpus::SegmentTable> table, corpus::PaftInput input,
                            std::uint64_t seed) {
  require(table != nullptr, "redrawn_triplets: no segment table");
  struct State {
    std::vector<ABXRecord> records;
    std::vector<Instrument> instruments;
    std::shared_ptr<const corpus::SegmentTable> table;
    corpus::PaftInput input;
    corpus::Rng rng;
    int epoch = 0;
    std::shared_ptr<const std::vector<Triplet>> current;
  };
  auto st = std::make_shared<State>(State{std::move(records), std::move(instruments), std::move(table), input,
                                          corpus::Rng(seed), 0, nullptr});
  return [st](int epoch) {
    // Clean inputs have nothing to redraw.
    const bool clean = st->input == corpus::PaftInput::clean;
    if (st->current && (epoch == st->epoch || clean)) return st->current;
    require(clean || epoch == st->epoch + 1, "redrawn_triplets: epochs must be requested in order");
    std::vector<Triplet> out;
    for (Instrument i : st->instruments) {
      auto t = corpus::build_paft_triplets(st->records, i, *st->table, st->input, st->rng);
      for (auto& x : t.triplets) out.push_back(std::move(x));
    }
    st->epoch = epoch;
    st->current = std::make_shared<const std::vector<Triplet>>(std::move(out));
    return st->current;
  };
}

TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const std::vector<Triplet>& triplets,
                     CleanModel& model, MetricsLog* log) {
  return run_paft(plan, sc, fixed_triplets(triplets), model, log);
}

TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const std::vector<Triplet>& triplets,
                     CascadeModel& model, MetricsLog* log) {
  return run_paft(plan, sc, fixed_triplets(triplets), model, log);
}

TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const std::vector<Triplet>& triplets,
                     DirectModel& model, MetricsLog* log) {
  return run_paft(plan, sc, fixed_triplets(triplets), model, log);
}

TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const PaftSource& source, CleanModel& model,
                     MetricsLog* log) {
  const auto ps = model.params();
  nets::set_trainable(ps, true);
  return paft_loop(plan, source, ps,
                   [&](const TripletSet& set, std::size_t k) {
                     return clean_triplet_terms(model, (*set)[k], sc, plan.margin);
                   },
                   false, log, "paft.clean");
}

TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const PaftSource& source, CascadeModel& model,
                     MetricsLog* log) {
  if (plan.regime == Regime::cascade_paft) {
    const auto all = model.params();
    nets::set_trainable(all, true);
    const double lambda = plan.paft_separation_loss ? plan.lambda_sep : 0.0;
    return paft_loop(plan, source, all,
                     [&](const TripletSet& set, std::size_t k) {
                       return cascade_triplet_terms(model, (*set)[k], sc, plan.margin, lambda);
                     },
                     lambda > 0.0, log, "cascade_paft");
  }
  FreezeGuard frozen(model.mss_params());
  const auto ext = model.extractor_params();
  nets::set_trainable(ext, true);
  // The separator is frozen, so its mel outputs are computed once per
  // triplet set.
  TripletSet cached_for;
  std::vector<std::array<ag::Var, 3>> mels;
  return paft_loop(plan, source, ext,
                   [&](const TripletSet& set, std::size_t k) {
                     if (set != cached_for) {
                       mels.assign(set->size(), {});
                       for (std::size_t q = 0; q < set->size(); ++q) {
                         const Triplet& t = (*set)[q];
                         const corpus::Example* members[3] = {&t.anchor, &t.positive, &t.negative};
                         for (int j = 0; j < 3; ++j)
                           mels[q][j] = model.mel.forward(
                               mss_for(model, t.target).forward(mag_var(sc, members[j]->audio.mix)).separated);
                       }
                       cached_for = set;
                     }
                     const auto& ex = extractor_for(model.extractors, (*set)[k].target);
                     LossTerms out;
                     out.total = triplet_loss(ex.forward(mels[k][0]), ex.forward(mels[k][1]),
                                              ex.forward(mels[k][2]), plan.margin);
                     out.triplet = out.total.item();
                     return out;
                   },
                   false, log, "paft.cascade");
}

TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const PaftSource& source, DirectModel& model,
                     MetricsLog* log) {
  FreezeGuard frozen(model.decoder_params());
  const auto ext = model.extractor_params();
  nets::set_trainable(ext, true);
  return paft_loop(plan, source, ext,
                   [&](const TripletSet& set, std::size_t k) {
                     return direct_triplet_terms(model, (*set)[k], sc, plan.margin, 0.0,
                                                 corpus::CombinationPattern::all());
                   },
                   false, log, "paft.direct");
}

}  // namespace inmsrl::training
