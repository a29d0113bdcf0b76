#include <iostream>

#include <CLI11.hpp>

#include "inmsrl/pipeline.hpp"

using namespace inmsrl;

namespace {

pipeline::RunConfig config_or_default(const std::string& path) {
  pipeline::RunConfig c;
  if (!path.empty()) return pipeline::load_config(path);
  pipeline::apply_env(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instrument-wise music similarity representation learning"};
  app.require_subcommand(1);

  pipeline::SynthDataArgs synth;
  auto* sd = app.add_subcommand("synth-data", "Write a synthetic multi-stem corpus");
  sd->add_option("--pieces,-n", synth.n_pieces, "Number of pieces")->capture_default_str();
  sd->add_option("--duration", synth.duration_s, "Seconds per piece")->capture_default_str();
  sd->add_option("--sample-rate", synth.sample_rate, "Sample rate in Hz")->capture_default_str();
  sd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  sd->add_option("--out,-o", synth.out_dir, "Output directory")->required();
  sd->add_flag("--force", synth.force, "Replace a non-empty output directory");

  std::string config_path, regime;
  std::optional<std::uint64_t> seed;
  bool force = false;
  auto* tr = app.add_subcommand("train", "Train one regime");
  tr->add_option("--config,-c", config_path, "Run configuration (JSON)")->required();
  tr->add_option("--regime,-r", regime,
                 "mss, clean, cascade, cascade_ft, cascade_paft, direct_pretrain, direct_multitask or paft")
      ->required();
  tr->add_option("--seed", seed, "Override the configured seed");
  tr->add_flag("--force", force, "Overwrite an existing checkpoint");

  std::string metric, model;
  std::optional<std::string> instrument, est, ref, abx_subset;
  bool onehot = false, per_response = false;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("metric", metric, "mes-normal, mes-pseudo, abx, sdr or export-embed")->required();
  ev->add_option("--config,-c", config_path, "Run configuration (JSON)");
  ev->add_option("--regime,-r", model, "Checkpoint to evaluate (defaults to eval.model)");
  ev->add_option("--instrument,-i", instrument, "Target instrument");
  ev->add_option("--seed", seed, "Override the configured seed");
  ev->add_option("--estimate", est, "sdr: estimated signal (WAV)");
  ev->add_option("--reference", ref, "sdr: reference signal (WAV)");
  ev->add_option("--abx-subset", abx_subset, "abx: 'test' (held-out 30%) or 'all'");
  ev->add_flag("--oracle-onehot", onehot, "Use one-hot music IDs instead of a model (debugging)");
  ev->add_flag("--per-response", per_response, "abx: weight every vote");
  ev->add_flag("--force", force, "Accepted for symmetry; reports are always overwritten");

  int abx_count = 200;
  auto* sa = app.add_subcommand("synth-abx", "Write oracle ABX judgements for the configured corpus");
  sa->add_option("--config,-c", config_path, "Run configuration (JSON)")->required();
  sa->add_option("--instrument,-i", instrument, "Instrument the listeners judge");
  sa->add_option("--records,-n", abx_count, "Number of records")->capture_default_str();
  sa->add_option("--seed", seed, "Override the configured seed");
  sa->add_flag("--force", force, "Overwrite an existing records file");

  auto* ex = app.add_subcommand("export-embed", "Export visualization-set embeddings as CSV");
  ex->add_option("--config,-c", config_path, "Run configuration (JSON)")->required();
  ex->add_option("--regime,-r", model, "Checkpoint to embed with");
  ex->add_option("--instrument,-i", instrument, "Target instrument");
  ex->add_option("--seed", seed, "Override the configured seed");
  ex->add_flag("--force", force, "Accepted for symmetry; files are always overwritten");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sd->parsed()) {
      pipeline::cmd_synth_data(synth);
      std::cout << "wrote " << synth.n_pieces << " pieces to " << synth.out_dir.string() << '\n';
      return 0;
    }
    pipeline::RunConfig cfg = config_or_default(config_path);
    if (seed) cfg.seed = *seed;
    if (sa->parsed()) {
      const Instrument inst = instrument ? instrument_from_string(*instrument) : Instrument::drums;
      pipeline::cmd_synth_abx(cfg, inst, abx_count, force);
      std::cout << "wrote " << abx_count << " records to " << cfg.abx_records.string() << '\n';
      return 0;
    }
    if (tr->parsed()) {
      const auto r = pipeline::cmd_train(cfg, training::regime_from_string(regime), force, &std::cout);
      std::cout << "config hash " << r.meta.at("config_hash").get<std::string>() << '\n';
      return 0;
    }
    if (!model.empty()) cfg.eval.model = model;
    if (instrument) cfg.eval.instrument = instrument_from_string(*instrument);
    if (onehot) cfg.eval.oracle_onehot = true;
    if (per_response) cfg.eval.per_response = true;
    if (abx_subset) cfg.eval.abx_subset = *abx_subset;
    if (est) cfg.eval.sdr_estimate = *est;
    if (ref) cfg.eval.sdr_reference = *ref;
    pipeline::cmd_eval(cfg, ex->parsed() ? "export-embed" : metric, std::cout);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
