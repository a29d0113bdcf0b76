#pragma once

// Command implementations behind the inmsrl tool: run configuration,
// checkpoint layout and the regime dependency graph.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>

#include <nlohmann/json.hpp>

#include "inmsrl/eval.hpp"
#include "inmsrl/training.hpp"

namespace inmsrl::pipeline {

struct EvalOptions {
  Instrument instrument = Instrument::drums;
  /// Checkpoint (regime directory) to evaluate.
  std::string model = "cascade_ft";
  double mes_segment_s = 10.0;
  double abx_segment_s = 5.0;
  double min_consensus = 0.75;
  bool per_response = false;
  /// "test" scores the held-out 30% of the ABX split, "all" every record.
  std::string abx_subset = "test";
  /// Replace model embeddings with one-hot music IDs (debugging aid).
  bool oracle_onehot = false;
  std::filesystem::path sdr_estimate, sdr_reference;
};

struct RunConfig {
  std::filesystem::path corpus;
  std::filesystem::path test_corpus;  // defaults to corpus
  std::filesystem::path abx_records;
  std::filesystem::path out_dir = "runs";
  std::uint64_t seed = 0;
  training::ModelConfig model = training::desk_model_config();
  /// TrainPlan overrides; an object keyed by a regime name applies to that
  /// regime only.
  nlohmann::json train = nlohmann::json::object();
  std::string paft_base = "cascade_ft";
  EvalOptions eval;
};

/// Relative paths resolve against the config file's directory. INMSRL_OUT,
/// when set, replaces out_dir.
RunConfig load_config(const std::filesystem::path& path);
RunConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const RunConfig& c);
std::string config_hash(const RunConfig& c);
void apply_env(RunConfig& c);

training::TrainPlan make_plan(const RunConfig& c, training::Regime r);

struct SynthDataArgs {
  int n_pieces = 20;
  double duration_s = 60.0;
  std::uint64_t seed = 0;
  int sample_rate = 8000;
  std::filesystem::path out_dir;
  bool force = false;
};

void cmd_synth_data(const SynthDataArgs& a);

/// Oracle ABX judgements over the configured corpus, segmented at
/// eval.abx_segment_s, written to abx_records (JSONL).
void cmd_synth_abx(const RunConfig& c, Instrument inst, int records, bool force);

struct TrainResult {
  std::filesystem::path dir;
  nlohmann::json meta;
};

/// Trains one regime and writes params.bin, meta.json and metrics.jsonl under
/// out_dir/<regime>/.
TrainResult cmd_train(const RunConfig& c, training::Regime r, bool force, std::ostream* progress = nullptr);

using Model = std::variant<training::CleanModel, training::CascadeModel, training::DirectModel>;

struct LoadedModel {
  Model model;
  nlohmann::json meta;
};

std::filesystem::path regime_dir(const RunConfig& c, std::string_view regime);
LoadedModel load_model(const RunConfig& c, std::string_view regime);

/// Metrics: mes-normal, mes-pseudo, abx, sdr, export-embed. Writes
/// out_dir/eval/<metric>.json and prints a one-line summary.
nlohmann::json cmd_eval(const RunConfig& c, const std::string& metric, std::ostream& out);

/// Renders a dB value, spelling infinities as "inf" / "-inf".
std::string format_db(double db);

}  // namespace inmsrl::pipeline
