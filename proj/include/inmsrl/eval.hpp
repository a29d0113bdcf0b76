#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inmsrl/abx.hpp"
#include "inmsrl/corpus.hpp"

namespace inmsrl::eval {

using Rng = std::mt19937_64;

/// One embedded segment. `label` is the music ID the 5NN predicts (the
/// target piece for pseudo pieces); `shape_label` is the non-target piece.
struct EmbeddingRow {
  std::string piece_id;
  int segment_index = 0;
  Instrument instrument = Instrument::drums;
  std::string label;
  std::string shape_label;
  std::vector<double> vector;
};

/// Rows grouped by instrument. When `subspace_masked` is set, distances for
/// instrument i use only i's subspace of the (disentangled) vectors.
class EmbeddingIndex {
 public:
  explicit EmbeddingIndex(bool subspace_masked = false) : masked_(subspace_masked) {}

  /// Empty labels default to the piece id.
  void add(EmbeddingRow row);
  const std::vector<EmbeddingRow>& rows() const { return rows_; }
  std::vector<std::size_t> rows_of(Instrument i) const;
  bool subspace_masked() const { return masked_; }
  std::size_t size() const { return rows_.size(); }

  double distance(const EmbeddingRow& a, const EmbeddingRow& b, Instrument i) const;

 private:
  bool masked_;
  std::vector<EmbeddingRow> rows_;
  std::map<Instrument, std::size_t> dims_;
};

enum class Exclusion {
  self,        // leave-one-out
  same_piece,  // every row of the query's piece
};

/// Majority label among the 5 nearest eligible rows. Count ties go to the
/// smallest summed neighbour distance, then the lexicographically smallest
/// label.
std::string knn5_predict(const EmbeddingIndex& idx, std::size_t query, Instrument inst,
                         Exclusion rule = Exclusion::self);

/// Pieces that remain eligible for `query` and share its label.
std::vector<std::string> eligible_correct_pieces(const EmbeddingIndex& idx, std::size_t query, Instrument inst,
                                                 Exclusion rule);

struct Score {
  double accuracy = 0.0;
  int correct = 0;
  int n = 0;
};

/// Micro-averaged leave-one-out 5NN accuracy over every row of `inst`.
Score mes_normal(const EmbeddingIndex& idx, Instrument inst);

/// 5NN over target labels, excluding the query's whole piece.
Score mes_pseudo(const EmbeddingIndex& idx, Instrument inst);

struct TestPiece {
  std::string id;
  std::string target_piece;
  std::string nontarget_piece;
  bool pseudo = false;
};

struct MesPseudoSet {
  Instrument target = Instrument::drums;
  std::vector<TestPiece> pieces;  // 30 pseudo followed by 10 normal
};

MesPseudoSet build_mes_pseudo_set(const corpus::Corpus& c, Instrument target, std::uint64_t seed);

/// Rendered segment of a test piece. Pseudo pieces pair segment k of the
/// target piece with segment k of the non-target piece.
struct TestSegment {
  std::string piece_id;
  int segment_index = 0;
  std::string label;
  std::string shape_label;
  corpus::Example example;
};

std::vector<TestSegment> render_mes_normal(const corpus::Corpus& c, double duration_s);
std::vector<TestSegment> render_mes_pseudo(const corpus::Corpus& c, const MesPseudoSet& set, double duration_s);

struct VisualizationSet {
  Instrument target = Instrument::drums;
  std::vector<TestSegment> segments;  // 100 pairs x 10 segments
};

VisualizationSet build_visualization_set(const corpus::Corpus& c, Instrument target, std::uint64_t seed,
                                         double duration_s, int n_pieces = 10, int n_segments = 10);

struct Interval {
  double low = 0.0;
  double high = 1.0;
};

/// Exact two-sided binomial confidence interval.
Interval clopper_pearson(int successes, int trials, double alpha = 0.05);

struct ABXEmbedding {
  std::vector<double> x, a, b;
};

struct AbxOptions {
  double min_consensus = 0.75;
  std::optional<ABXCondition> condition;
  std::optional<Instrument> instrument;
  /// Restrict distances to the instrument's subspace.
  bool subspace_masked = false;
  /// Score every vote instead of every record's majority.
  bool per_response = false;
};

struct AbxScore {
  double agreement = 0.0;
  int correct = 0;
  int n = 0;
  Interval ci;
  int filtered_out = 0;
};

/// True when the record passes the consensus filter (strictly above).
bool passes_consensus(const ABXRecord& r, double min_consensus);

/// Predicts A when d(X,A) <= d(X,B).
bool predicts_a(const ABXEmbedding& e, Instrument inst, bool subspace_masked);

AbxScore abx_agreement(const std::vector<ABXRecord>& records,
                       const std::map<std::string, ABXEmbedding>& embeddings, const AbxOptions& opts);

struct AbxSplit {
  std::vector<ABXRecord> train, test;
};

/// Stratified by (instrument, condition); round(ratio * n) of every stratum
/// goes to train.
AbxSplit abx_split(const std::vector<ABXRecord>& records, double train_ratio, std::uint64_t seed);

/// CSV: piece_id,segment_index,instrument,color_label,shape_label,dim_0..
void export_embeddings(const std::vector<EmbeddingRow>& rows, const std::filesystem::path& path);
std::vector<EmbeddingRow> import_embeddings(const std::filesystem::path& path);

nlohmann::json metric_report(const std::string& metric, Instrument inst, const std::string& condition,
                             double value, Interval ci, int n);

/// Synthetic ABX judgements from an oracle over drum-stem statistics: the
/// listener prefers the candidate whose stem is brighter-or-darker in the
/// same way as X (mean log-spectral centroid and high-band energy ratio).
struct OracleOptions {
  int records = 200;
  int voters = 10;
  double duration_s = 5.0;
  /// Steepness of the vote probability in the oracle distance gap.
  double sharpness = 8.0;
  double one_shared_fraction = 0.3;
};

std::vector<double> oracle_features(const dsp::Waveform& stem);

std::vector<ABXRecord> synth_abx_records(const corpus::SegmentTable& table, Instrument inst, std::uint64_t seed,
                                         const OracleOptions& opts = {});

}  // namespace inmsrl::eval
