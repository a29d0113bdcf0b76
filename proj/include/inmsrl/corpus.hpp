#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "inmsrl/dsp.hpp"
#include "inmsrl/types.hpp"

namespace inmsrl {
struct ABXRecord;
}

namespace inmsrl::corpus {

using Rng = std::mt19937_64;

inline constexpr double kSilenceThresholdDbfs = -60.0;

struct PieceManifest {
  std::string piece_id;
  std::array<std::filesystem::path, kNumInstruments> stem_paths;
};

struct Manifest {
  std::vector<PieceManifest> pieces;  // sorted by piece_id
};

/// Parses {"pieces": [{"id", "stems": {...}}]}. Relative stem paths are
/// resolved against the manifest's directory.
Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& m);

/// Per-piece stems plus their mix. mix == gain * sum(stems); gain < 1 only
/// when the raw sum would clip.
struct StemSet {
  std::array<dsp::Waveform, kNumInstruments> stems;
  dsp::Waveform mix;
  double gain = 1.0;

  const dsp::Waveform& stem(Instrument i) const { return stems[index_of(i)]; }
  /// The stem as it appears inside the mix (gain applied).
  dsp::Waveform scaled_stem(Instrument i) const;
  int sample_rate() const { return mix.sample_rate; }
  std::size_t length() const { return mix.samples.size(); }
};

StemSet make_stem_set(std::array<dsp::Waveform, kNumInstruments> stems);

struct Piece {
  std::string id;
  StemSet audio;
};

/// Immutable after construction; pieces are ordered by id.
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<Piece> pieces);

  std::size_t size() const { return pieces_.size(); }
  const Piece& at(std::size_t i) const { return pieces_.at(i); }
  const Piece& find(const std::string& id) const;
  std::size_t index_of_piece(const std::string& id) const;
  const std::vector<Piece>& pieces() const { return pieces_; }
  int sample_rate() const;

  /// Subset by ids, keeping order.
  Corpus subset(const std::vector<std::string>& ids) const;

 private:
  std::vector<Piece> pieces_;
};

Corpus load_corpus(const Manifest& m);

struct SynthPieceParams {
  std::string id;
  double drum_bpm = 0.0;
  double drum_ioi_s = 0.0;
  double drum_resonance_hz = 0.0;
  double drum_decay_s = 0.0;
  double drum_noise_cutoff_hz = 0.0;
  double bass_f0_hz = 0.0;
  double bass_note_s = 0.0;
  double piano_f0_hz = 0.0;
  double piano_note_s = 0.0;
  double guitar_f0_hz = 0.0;
  double guitar_note_s = 0.0;
  double residual_f0_hz = 0.0;
  std::array<int, 4> bass_pattern{};
  std::array<int, 4> melody_pattern{};
};

nlohmann::json to_json(const SynthPieceParams& p);

struct SynthCorpus {
  Corpus corpus;
  std::vector<SynthPieceParams> params;
};

/// Deterministic multi-stem generator: each piece has its own drum tempo and
/// timbre and its own fundamentals for the tonal stems.
SynthCorpus synth_corpus(int n_pieces, double duration_s, std::uint64_t seed,
                         int sample_rate = dsp::kDefaultSampleRate);

/// Writes WAVs under out_dir/<piece>/<instrument>.wav, manifest.json and
/// params.json.
void write_synth_corpus(const SynthCorpus& sc, const std::filesystem::path& out_dir);

struct SegmentRef {
  std::string piece_id;
  double start = 0.0;
  double duration = 0.0;

  bool operator==(const SegmentRef&) const = default;
};

nlohmann::json to_json(const SegmentRef& s);
SegmentRef segment_from_json(const nlohmann::json& j);

std::vector<SegmentRef> slice_segments(const Piece& piece, double duration_s, double hop_s);

/// Sample range of a segment inside its piece.
std::pair<std::size_t, std::size_t> sample_range(const SegmentRef& s, int sample_rate);

StemSet extract_segment(const Corpus& c, const SegmentRef& s);
dsp::Waveform extract_stem(const Corpus& c, const SegmentRef& s, Instrument i);

bool is_silent(std::span<const float> segment, double threshold_dbfs = kSilenceThresholdDbfs);
inline bool is_silent(const dsp::Waveform& w, double threshold_dbfs = kSilenceThresholdDbfs) {
  return is_silent(std::span<const float>(w.samples), threshold_dbfs);
}

/// Non-overlapping segments of one length, with the non-silent ones indexed
/// per instrument. Samplers draw only from this table.
class SegmentTable {
 public:
  SegmentTable(const Corpus& c, double duration_s,
               double threshold_dbfs = kSilenceThresholdDbfs);

  const Corpus& corpus() const { return *corpus_; }
  double duration() const { return duration_; }
  const std::vector<SegmentRef>& segments(std::size_t piece) const { return segments_[piece]; }
  /// Indices into segments(piece) where instrument i is audible.
  const std::vector<int>& audible(std::size_t piece, Instrument i) const {
    return audible_[piece][index_of(i)];
  }
  /// Pieces with at least `min_count` audible segments for i.
  std::vector<std::size_t> eligible_pieces(Instrument i, std::size_t min_count) const;

 private:
  const Corpus* corpus_;
  double duration_;
  std::vector<std::vector<SegmentRef>> segments_;
  std::vector<std::array<std::vector<int>, kNumInstruments>> audible_;
};

enum class Provenance { s4, pseudo_basic, pseudo_additional, abx };
std::string_view to_string(Provenance p);

/// One triplet member: the rendered segment and, per instrument, where that
/// stem came from.
struct Example {
  StemSet audio;
  std::array<SegmentRef, kNumInstruments> sources;
};

struct Triplet {
  Example anchor;
  Example positive;
  Example negative;
  Instrument target = Instrument::drums;
  Provenance provenance = Provenance::s4;
};

/// Renders an example whose stem i comes from sources[i]. Sources with an
/// empty piece_id contribute silence.
Example render_example(const Corpus& c, const std::array<SegmentRef, kNumInstruments>& sources);

Triplet sample_s4_triplet(const SegmentTable& table, Instrument target, Rng& rng);

struct PseudoOptions {
  std::optional<double> avoid_target_start;
  std::optional<double> avoid_nontarget_start;
  /// Overrides the target segment choice (PAFT uses a fixed ABX segment).
  std::optional<SegmentRef> target_segment;
};

Example make_pseudo_piece(const SegmentTable& table, Instrument target,
                          const std::string& target_src, const std::string& nontarget_src,
                          Rng& rng, const PseudoOptions& opts = {});

struct PseudoPair {
  Triplet basic;
  Triplet additional;
};

PseudoPair sample_pseudo_triplet(const SegmentTable& table, Instrument target, Rng& rng);

/// Non-empty subset of the five instruments.
struct CombinationPattern {
  std::uint8_t bits = 0x1f;

  bool has(Instrument i) const { return (bits >> index_of(i)) & 1u; }
  static CombinationPattern all() { return {0x1f}; }
  static CombinationPattern only(Instrument i) {
    return {static_cast<std::uint8_t>(1u << index_of(i))};
  }
};

inline constexpr int kNumCombinationPatterns = 31;

/// Uniform draw over the 31 non-silent patterns; returns the gain-consistent
/// sum of the present stems.
std::pair<dsp::Waveform, CombinationPattern> sample_combination_input(const StemSet& s, Rng& rng);
dsp::Waveform combination_mix(const StemSet& s, CombinationPattern p);

enum class PaftInput { clean, pseudo };

struct PaftTriplets {
  std::vector<Triplet> triplets;
  int ties_excluded = 0;
};

/// Anchor = X, positive = majority choice, negative = the other candidate.
/// The clean regime keeps only the target stem; the pseudo regime mixes each
/// member with non-target stems from other pieces.
PaftTriplets build_paft_triplets(const std::vector<ABXRecord>& records, Instrument target,
                                 const SegmentTable& table, PaftInput regime, Rng& rng);

}  // namespace inmsrl::corpus
