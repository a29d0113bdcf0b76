#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inmsrl/abx.hpp"
#include "inmsrl/corpus.hpp"
#include "inmsrl/nets.hpp"

namespace inmsrl::training {

// ---------------------------------------------------------------------------
// Configuration

struct SpectralConfig {
  int sample_rate = dsp::kDefaultSampleRate;
  int window = dsp::kDefaultWindow;
  int hop = dsp::kDefaultHop;
  int n_mels = dsp::kDefaultMels;

  int bins() const { return window / 2 + 1; }
};

struct ModelConfig {
  SpectralConfig spectral;
  nets::UNetConfig mss{6, 16};
  nets::UNetConfig extractor{6, 16};
  // Bottleneck channels must split into five groups for Conditioning3D.
  nets::UNetConfig direct{6, 10};
  int embed_dim = nets::kEmbeddingDim;
};

/// Reduced configuration for CPU-scale runs: 8 kHz audio, 256-sample
/// window, depth-3 networks.
ModelConfig desk_model_config();

enum class Regime { mss, clean, cascade, cascade_ft, cascade_paft, direct_pretrain, direct_multitask, paft };

std::string_view to_string(Regime r);
Regime regime_from_string(std::string_view s);

struct TrainPlan {
  Regime regime = Regime::mss;
  double lr = 5e-5;
  int max_epochs = 400;
  int patience = 100;
  int paft_epochs = 100;
  double lambda_sep = 1.0;
  double lambda_rec = 1.0;
  double margin = 1.0;
  std::uint64_t seed = 0;
  int batch_size = 16;
  /// Mini-batches per epoch; triplets are regenerated for every batch.
  int steps_per_epoch = 8;
  /// Size of the fixed validation set used for early stopping.
  int val_examples = 16;
  double segment_s = 3.0;
  /// Train on pseudo-musical-piece triplets (otherwise plain S4 triplets).
  bool pseudo_pieces = true;
  /// cascade_paft: keep the auxiliary separation loss.
  bool paft_separation_loss = true;
  /// Instruments to train; empty means the regime's default set.
  std::vector<Instrument> instruments;
};

/// Learning rates used when a plan does not override them.
double default_lr(Regime r);
TrainPlan default_plan(Regime r);

void validate(const TrainPlan& p);

// ---------------------------------------------------------------------------
// Losses

double triplet_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n,
                    double margin);
ag::Var triplet_loss(const ag::Var& a, const ag::Var& p, const ag::Var& n, double margin);

double l1_loss(const dsp::MagnitudeSpectrogram& x, const dsp::MagnitudeSpectrogram& y);
double mse_loss(std::span<const double> x, std::span<const double> y);

struct StopDecision {
  bool stop = false;
  int best_epoch = 0;
};

/// Stop once the epoch index minus the first argmin reaches `patience`.
StopDecision early_stopper(std::span<const double> history, int patience);

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
 public:
  Adam(nets::ParamList params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Updates every parameter that currently requires a gradient.
  void step();
  void zero_grad();
  double lr() const { return lr_; }

 private:
  nets::ParamList params_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Model bundles

dsp::MagnitudeSpectrogram spectrogram(const SpectralConfig& c, const dsp::Waveform& w);

struct CleanModel {
  std::map<Instrument, nets::FeatureExtractor> extractors;
  nets::MelFrontEnd mel;

  nets::ParamList params() const;
  CleanModel clone() const;
};

struct CascadeModel {
  std::map<Instrument, nets::MSSModel> mss;
  std::map<Instrument, nets::FeatureExtractor> extractors;
  nets::MelFrontEnd mel;

  nets::ParamList mss_params() const;
  nets::ParamList extractor_params() const;
  nets::ParamList params() const;
  CascadeModel clone() const;
};

struct DirectModel {
  nets::DisentangledExtractor extractor;
  std::map<Instrument, nets::ReconstructionDecoder> decoders;

  nets::ParamList extractor_params() const { return extractor.params(); }
  nets::ParamList decoder_params() const;
  nets::ParamList params() const;
  DirectModel clone() const;
};

CleanModel make_clean_model(const ModelConfig& c, std::span<const Instrument> instruments, std::uint64_t seed);
CascadeModel make_cascade_model(const ModelConfig& c, std::span<const Instrument> instruments,
                                std::uint64_t seed);
DirectModel make_direct_model(const ModelConfig& c, std::uint64_t seed);

/// Embeds rendered segments for evaluation. Disentangled models return the
/// full vector; callers mask the target subspace.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<double> embed(const corpus::StemSet& s, Instrument target) const = 0;
  virtual bool disentangled() const { return false; }
};

class CleanEmbedder : public Embedder {
 public:
  CleanEmbedder(const CleanModel& m, SpectralConfig c) : m_(m), c_(c) {}
  std::vector<double> embed(const corpus::StemSet& s, Instrument target) const override;

 private:
  const CleanModel& m_;
  SpectralConfig c_;
};

class CascadeEmbedder : public Embedder {
 public:
  CascadeEmbedder(const CascadeModel& m, SpectralConfig c) : m_(m), c_(c) {}
  std::vector<double> embed(const corpus::StemSet& s, Instrument target) const override;

 private:
  const CascadeModel& m_;
  SpectralConfig c_;
};

class DirectEmbedder : public Embedder {
 public:
  DirectEmbedder(const DirectModel& m, SpectralConfig c) : m_(m), c_(c) {}
  std::vector<double> embed(const corpus::StemSet& s, Instrument target) const override;
  bool disentangled() const override { return true; }

 private:
  const DirectModel& m_;
  SpectralConfig c_;
};

// ---------------------------------------------------------------------------
// Per-triplet objectives (also used by gradient checks)

struct LossTerms {
  ag::Var total;
  double triplet = 0.0;
  double separation = 0.0;
  double reconstruction = 0.0;
  int separation_evals = 0;
};

/// Clean extractors on the target stem of each member.
LossTerms clean_triplet_terms(const CleanModel& m, const corpus::Triplet& t, const SpectralConfig& c,
                              double margin);

/// MSS -> mel -> extractor for the triplet's target instrument, plus
/// lambda_sep times the mean L1 separation loss over the three members
/// (skipped when lambda_sep == 0).
LossTerms cascade_triplet_terms(const CascadeModel& m, const corpus::Triplet& t, const SpectralConfig& c,
                                double margin, double lambda_sep);

/// Triplet loss on Conditioning1D-masked embeddings plus lambda_rec times the
/// summed L1 reconstruction loss over the instruments present in
/// `pattern` applied to the anchor's stems.
LossTerms direct_triplet_terms(const DirectModel& m, const corpus::Triplet& t, const SpectralConfig& c,
                               double margin, double lambda_rec, corpus::CombinationPattern pattern);

/// Regression of the disentangled vector of a combination mix onto the
/// concatenated Clean features of the present stems (zeros for absent ones).
std::vector<double> pretrain_target(const CleanModel& clean, const corpus::StemSet& s,
                                    corpus::CombinationPattern pattern, const SpectralConfig& c);
ag::Var pretrain_loss(const DirectModel& m, const corpus::StemSet& s, corpus::CombinationPattern pattern,
                      std::span<const double> target, const SpectralConfig& c);

// ---------------------------------------------------------------------------
// Training loops

/// Append-only JSON-lines log of per-epoch loss components.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(std::filesystem::path path, bool timestamps = true);

  void append(const std::string& stage, int epoch, const std::string& split,
              const std::map<std::string, double>& losses);
  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::optional<std::filesystem::path> path_;
  bool timestamps_ = true;
  std::vector<nlohmann::json> records_;
};

struct TrainReport {
  double initial_val_loss = 0.0;
  std::vector<double> train_losses;
  std::vector<double> val_losses;
  int best_epoch = -1;
  int epochs_run = 0;
  bool stopped_early = false;
  std::map<std::string, long> counters;
  /// Validation loss components at the start and at the best epoch.
  std::map<std::string, double> initial_components;
  std::map<std::string, double> best_components;

  double best_val_loss() const;
};

struct TrainData {
  const corpus::Corpus& train;
  const corpus::Corpus& val;
};

/// Deterministic train/validation split (270:1200 proportion, at least 3
/// validation pieces).
std::pair<corpus::Corpus, corpus::Corpus> split_corpus(const corpus::Corpus& c, std::uint64_t seed);

std::map<Instrument, TrainReport> train_mss(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                                            CascadeModel& model, MetricsLog* log = nullptr);

std::map<Instrument, TrainReport> train_clean(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                                              CleanModel& model, MetricsLog* log = nullptr);

/// Extractor stage with frozen separators.
TrainReport train_cascade_extractors(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                                     CascadeModel& model, MetricsLog* log = nullptr);

/// End-to-end fine-tuning of separators and extractors together.
TrainReport finetune_e2e(const TrainPlan& plan, const SpectralConfig& sc, TrainData data, CascadeModel& model,
                         MetricsLog* log = nullptr);

TrainReport pretrain_direct(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                            const CleanModel& clean, DirectModel& model, MetricsLog* log = nullptr);

TrainReport train_direct_multitask(const TrainPlan& plan, const SpectralConfig& sc, TrainData data,
                                   DirectModel& model, MetricsLog* log = nullptr);

/// Triplets for one PAFT epoch (1-based, requested in order).
using PaftSource = std::function<std::shared_ptr<const std::vector<corpus::Triplet>>(int epoch)>;

PaftSource fixed_triplets(std::vector<corpus::Triplet> triplets);

/// Rebuilds the ABX triplets every epoch, so pseudo pieces get fresh
/// non-target accompaniment.
PaftSource redrawn_triplets(std::vector<ABXRecord> records, std::vector<Instrument> instruments,
                            std::shared_ptr<const corpus::SegmentTable> table, corpus::PaftInput input,
                            std::uint64_t seed);

/// Fine-tunes on ABX-derived triplets for exactly plan.paft_epochs epochs.
/// Only the extractors train, except for Regime::cascade_paft on a
/// CascadeModel, which unfreezes everything.
TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const std::vector<corpus::Triplet>& triplets,
                     CleanModel& model, MetricsLog* log = nullptr);
TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const std::vector<corpus::Triplet>& triplets,
                     CascadeModel& model, MetricsLog* log = nullptr);
TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const std::vector<corpus::Triplet>& triplets,
                     DirectModel& model, MetricsLog* log = nullptr);
TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const PaftSource& source, CleanModel& model,
                     MetricsLog* log = nullptr);
TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const PaftSource& source, CascadeModel& model,
                     MetricsLog* log = nullptr);
TrainReport run_paft(const TrainPlan& plan, const SpectralConfig& sc, const PaftSource& source, DirectModel& model,
                     MetricsLog* log = nullptr);

}  // namespace inmsrl::training
