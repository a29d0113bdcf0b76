#include "inmsrl/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

namespace inmsrl::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using training::Regime;

// ---------------------------------------------------------------------------
// Configuration

namespace {

json model_to_json(const training::ModelConfig& m) {
  return {{"sample_rate", m.spectral.sample_rate}, {"window", m.spectral.window},
          {"hop", m.spectral.hop},                 {"n_mels", m.spectral.n_mels},
          {"mss_depth", m.mss.depth},              {"mss_channels", m.mss.base_channels},
          {"extractor_depth", m.extractor.depth},  {"extractor_channels", m.extractor.base_channels},
          {"direct_depth", m.direct.depth},        {"direct_channels", m.direct.base_channels},
          {"embed_dim", m.embed_dim}};
}

training::ModelConfig model_from_json(const json& j) {
  training::ModelConfig m = training::desk_model_config();
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "full") m = training::ModelConfig{};
    else require(p == "desk", "config: unknown model preset '" + p + "'");
  }
  static const std::set<std::string> known{"preset",         "sample_rate",   "window",          "hop",
                                           "n_mels",         "mss_depth",     "mss_channels",    "extractor_depth",
                                           "extractor_channels", "direct_depth", "direct_channels", "embed_dim"};
  for (const auto& [k, v] : j.items()) require(known.count(k) == 1, "config: unknown model key '" + k + "'");
  const auto get = [&](const char* k, int& dst) {
    if (j.contains(k)) dst = j.at(k).get<int>();
  };
  get("sample_rate", m.spectral.sample_rate);
  get("window", m.spectral.window);
  get("hop", m.spectral.hop);
  get("n_mels", m.spectral.n_mels);
  get("mss_depth", m.mss.depth);
  get("mss_channels", m.mss.base_channels);
  get("extractor_depth", m.extractor.depth);
  get("extractor_channels", m.extractor.base_channels);
  get("direct_depth", m.direct.depth);
  get("direct_channels", m.direct.base_channels);
  get("embed_dim", m.embed_dim);
  require(m.direct.bottleneck_channels() % kNumInstruments == 0,
          "config: direct bottleneck channels must be divisible by 5");
  return m;
}

json eval_to_json(const EvalOptions& e) {
  return {{"instrument", std::string(to_string(e.instrument))},
          {"model", e.model},
          {"mes_segment_s", e.mes_segment_s},
          {"abx_segment_s", e.abx_segment_s},
          {"min_consensus", e.min_consensus},
          {"per_response", e.per_response},
          {"abx_subset", e.abx_subset},
          {"oracle_onehot", e.oracle_onehot},
          {"sdr_estimate", e.sdr_estimate.string()},
          {"sdr_reference", e.sdr_reference.string()}};
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path q(p);
  return q.is_absolute() || base.empty() ? q : base / q;
}

EvalOptions eval_from_json(const json& j, const fs::path& base) {
  EvalOptions e;
  for (const auto& [k, v] : j.items()) {
    if (k == "instrument") e.instrument = instrument_from_string(v.get<std::string>());
    else if (k == "model") e.model = v.get<std::string>();
    else if (k == "mes_segment_s") e.mes_segment_s = v.get<double>();
    else if (k == "abx_segment_s") e.abx_segment_s = v.get<double>();
    else if (k == "min_consensus") e.min_consensus = v.get<double>();
    else if (k == "per_response") e.per_response = v.get<bool>();
    else if (k == "abx_subset") e.abx_subset = v.get<std::string>();
    else if (k == "oracle_onehot") e.oracle_onehot = v.get<bool>();
    else if (k == "sdr_estimate") e.sdr_estimate = resolve(base, v.get<std::string>());
    else if (k == "sdr_reference") e.sdr_reference = resolve(base, v.get<std::string>());
    else throw Error("config: unknown eval key '" + k + "'");
  }
  require(e.abx_subset == "test" || e.abx_subset == "all", "config: abx_subset must be 'test' or 'all'");
  return e;
}

void apply_plan_keys(training::TrainPlan& p, const json& j, bool allow_nested) {
  for (const auto& [k, v] : j.items()) {
    if (k == "lr") p.lr = v.get<double>();
    else if (k == "max_epochs") p.max_epochs = v.get<int>();
    else if (k == "patience") p.patience = v.get<int>();
    else if (k == "paft_epochs") p.paft_epochs = v.get<int>();
    else if (k == "lambda_sep") p.lambda_sep = v.get<double>();
    else if (k == "lambda_rec") p.lambda_rec = v.get<double>();
    else if (k == "margin") p.margin = v.get<double>();
    else if (k == "batch_size") p.batch_size = v.get<int>();
    else if (k == "steps_per_epoch") p.steps_per_epoch = v.get<int>();
    else if (k == "val_examples") p.val_examples = v.get<int>();
    else if (k == "segment_s") p.segment_s = v.get<double>();
    else if (k == "pseudo_pieces") p.pseudo_pieces = v.get<bool>();
    else if (k == "paft_separation_loss") p.paft_separation_loss = v.get<bool>();
    else if (k == "instruments") {
      p.instruments.clear();
      for (const auto& s : v) p.instruments.push_back(instrument_from_string(s.get<std::string>()));
    } else if (allow_nested && v.is_object()) {
      training::regime_from_string(k);  // validates the name
    } else {
      throw Error("config: unknown train key '" + k + "'");
    }
  }
}

}  // namespace

RunConfig config_from_json(const json& j, const fs::path& base) {
  require(j.is_object(), "config: top level must be an object");
  RunConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "corpus") c.corpus = resolve(base, v.get<std::string>());
    else if (k == "test_corpus") c.test_corpus = resolve(base, v.get<std::string>());
    else if (k == "abx_records") c.abx_records = resolve(base, v.get<std::string>());
    else if (k == "out_dir") c.out_dir = resolve(base, v.get<std::string>());
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "model") c.model = model_from_json(v);
    else if (k == "train") c.train = v;
    else if (k == "paft_base") c.paft_base = v.get<std::string>();
    else if (k == "eval") c.eval = eval_from_json(v, base);
    else throw Error("config: unknown key '" + k + "'");
  }
  require(c.train.is_object(), "config: train must be an object");
  // Validate every override once up front.
  training::TrainPlan probe;
  apply_plan_keys(probe, c.train, true);
  for (const auto& [k, v] : c.train.items())
    if (v.is_object()) apply_plan_keys(probe, v, false);
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
  RunConfig c = config_from_json(j, path.parent_path());
  apply_env(c);
  return c;
}

void apply_env(RunConfig& c) {
  if (const char* out = std::getenv("INMSRL_OUT"); out && *out) c.out_dir = out;
}

json to_json(const RunConfig& c) {
  return {{"corpus", c.corpus.string()}, {"test_corpus", c.test_corpus.string()},
          {"abx_records", c.abx_records.string()}, {"seed", c.seed},
          {"model", model_to_json(c.model)}, {"train", c.train},
          {"paft_base", c.paft_base}, {"eval", eval_to_json(c.eval)}};
}

std::string config_hash(const RunConfig& c) {
  const std::string s = to_json(c).dump();
  return hex64(fnv1a(s.data(), s.size()));
}

training::TrainPlan make_plan(const RunConfig& c, Regime r) {
  training::TrainPlan p = training::default_plan(r);
  apply_plan_keys(p, c.train, true);
  const std::string name(training::to_string(r));
  if (c.train.contains(name)) apply_plan_keys(p, c.train.at(name), false);
  p.regime = r;
  p.seed = c.seed;
  training::validate(p);
  return p;
}

// ---------------------------------------------------------------------------
// synth-data

void cmd_synth_data(const SynthDataArgs& a) {
  require(a.n_pieces >= 2, "synth-data: need at least 2 pieces");
  require(!a.out_dir.empty(), "synth-data: output directory required");
  if (fs::exists(a.out_dir) && !fs::is_empty(a.out_dir)) {
    require(a.force, "synth-data: " + a.out_dir.string() + " is not empty (use --force)");
    fs::remove_all(a.out_dir);
  }
  write_synth_corpus(corpus::synth_corpus(a.n_pieces, a.duration_s, a.seed, a.sample_rate), a.out_dir);
}

// ---------------------------------------------------------------------------
// Checkpoints

fs::path regime_dir(const RunConfig& c, std::string_view regime) { return c.out_dir / std::string(regime); }

namespace {

std::vector<Instrument> instruments_of(const json& meta) {
  std::vector<Instrument> out;
  for (const auto& s : meta.at("instruments")) out.push_back(instrument_from_string(s.get<std::string>()));
  return out;
}

json instruments_json(std::span<const Instrument> insts) {
  json a = json::array();
  for (Instrument i : insts) a.push_back(std::string(to_string(i)));
  return a;
}

json read_meta(const fs::path& dir) {
  std::ifstream is(dir / "meta.json");
  require(static_cast<bool>(is), "cannot read " + (dir / "meta.json").string());
  json j;
  is >> j;
  return j;
}

bool has_checkpoint(const RunConfig& c, std::string_view regime) {
  const fs::path d = regime_dir(c, regime);
  return fs::exists(d / "params.bin") && fs::exists(d / "meta.json");
}

void need(const RunConfig& c, std::string_view regime, std::string_view requirement, std::string_view who) {
  require(has_checkpoint(c, regime), "regime " + std::string(who) + " requires " + std::string(requirement) +
                                         " (no checkpoint in " + regime_dir(c, regime).string() + ")");
}

std::string model_kind(std::string_view regime, const json& meta) {
  if (regime == "clean") return "clean";
  if (regime == "mss" || regime == "cascade" || regime == "cascade_ft" || regime == "cascade_paft") return "cascade";
  if (regime == "direct_pretrain" || regime == "direct_multitask") return "direct";
  if (regime == "paft") return model_kind(meta.at("base").get<std::string>(), meta);
  throw Error("unknown regime '" + std::string(regime) + "'");
}

nets::ParamList params_of(const Model& m, std::string_view regime) {
  if (regime == "mss") return std::get<training::CascadeModel>(m).mss_params();
  return std::visit([](const auto& x) { return x.params(); }, m);
}

Model build_model(const RunConfig& c, const std::string& kind, std::span<const Instrument> insts) {
  if (kind == "clean") return training::make_clean_model(c.model, insts, c.seed);
  if (kind == "cascade") return training::make_cascade_model(c.model, insts, c.seed);
  return training::make_direct_model(c.model, c.seed);
}

}  // namespace

LoadedModel load_model(const RunConfig& c, std::string_view regime) {
  need(c, regime, "a trained '" + std::string(regime) + "' checkpoint", "eval");
  const fs::path d = regime_dir(c, regime);
  json meta = read_meta(d);
  const auto insts = instruments_of(meta);
  Model m = build_model(c, model_kind(regime, meta), insts);
  nets::load_params(d / "params.bin", params_of(m, regime));
  return {std::move(m), std::move(meta)};
}

void cmd_synth_abx(const RunConfig& c, Instrument inst, int records, bool force) {
  require(!c.abx_records.empty(), "synth-abx: abx_records path not configured");
  require(force || !fs::exists(c.abx_records), "synth-abx: " + c.abx_records.string() + " exists (use --force)");
  require(!c.corpus.empty(), "config: corpus manifest path not set");
  const corpus::Corpus corp = corpus::load_corpus(corpus::load_manifest(c.corpus));
  const corpus::SegmentTable table(corp, c.eval.abx_segment_s);
  eval::OracleOptions o;
  o.records = records;
  o.duration_s = c.eval.abx_segment_s;
  if (c.abx_records.has_parent_path()) fs::create_directories(c.abx_records.parent_path());
  write_abx_jsonl(c.abx_records, eval::synth_abx_records(table, inst, c.seed, o));
}

// ---------------------------------------------------------------------------
// train

namespace {

corpus::Corpus load_corpus_at(const fs::path& manifest) {
  require(!manifest.empty(), "config: corpus manifest path not set");
  return corpus::load_corpus(corpus::load_manifest(manifest));
}

std::vector<ABXRecord> load_records(const RunConfig& c) {
  require(!c.abx_records.empty(), "ABX records file not configured (set abx_records)");
  require(fs::exists(c.abx_records), "ABX records file not found: " + c.abx_records.string());
  return read_abx_jsonl(c.abx_records);
}

json report_json(const training::TrainReport& r) {
  return {{"epoch", r.best_epoch >= 0 ? r.best_epoch : r.epochs_run},
          {"epochs_run", r.epochs_run},
          {"validation_loss", r.best_epoch >= 0 ? json(r.best_val_loss()) : json(nullptr)},
          {"initial_validation_loss", r.best_epoch >= 0 ? json(r.initial_val_loss) : json(nullptr)},
          {"final_train_loss", r.train_losses.empty() ? json(nullptr) : json(r.train_losses.back())},
          {"stopped_early", r.stopped_early},
          {"counters", r.counters}};
}

std::vector<Instrument> plan_instruments(const training::TrainPlan& p, std::span<const Instrument> fallback) {
  if (p.instruments.empty()) return {fallback.begin(), fallback.end()};
  return p.instruments;
}

/// PAFT triplet source for every instrument of the model, drawn from the
/// training part of the ABX split. Pseudo pieces are redrawn every epoch.
training::PaftSource paft_source(const RunConfig& c, const corpus::Corpus& corp, std::span<const Instrument> insts,
                                 corpus::PaftInput input, json& info) {
  const auto records = load_records(c);
  auto split = eval::abx_split(records, 0.7, c.seed);
  auto table = std::make_shared<const corpus::SegmentTable>(corp, c.eval.abx_segment_s);
  int ties = 0;
  for (Instrument i : insts)
    for (const auto& r : split.train) ties += r.instrument == i && r.tied();
  info["abx_train_records"] = split.train.size();
  info["ties_excluded"] = ties;
  auto source = training::redrawn_triplets(std::move(split.train), {insts.begin(), insts.end()}, std::move(table),
                                           input, c.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto first = source(1);
  info["paft_triplets"] = first->size();
  require(!first->empty(), "PAFT: no ABX training records for the model's instruments");
  return source;
}

}  // namespace

TrainResult cmd_train(const RunConfig& c, Regime r, bool force, std::ostream* progress) {
  const std::string name(training::to_string(r));
  const training::TrainPlan plan = make_plan(c, r);
  const fs::path dir = regime_dir(c, name);

  // Dependency graph: mss -> cascade -> cascade_ft | cascade_paft;
  // clean -> direct_pretrain -> direct_multitask; any -> paft.
  switch (r) {
    case Regime::cascade: need(c, "mss", "train_mss", name); break;
    case Regime::cascade_ft:
    case Regime::cascade_paft:
      need(c, "mss", "train_mss", name);
      need(c, "cascade", "train --regime cascade", name);
      break;
    case Regime::direct_pretrain: need(c, "clean", "train --regime clean", name); break;
    case Regime::direct_multitask: need(c, "direct_pretrain", "train --regime direct_pretrain", name); break;
    case Regime::paft:
      require(c.paft_base != "paft" && c.paft_base != "mss", "paft_base must name a trained embedding model");
      need(c, c.paft_base, "train --regime " + c.paft_base, name);
      break;
    default: break;
  }
  if (has_checkpoint(c, name)) require(force, "checkpoint exists in " + dir.string() + " (use --force)");
  fs::create_directories(dir);
  const fs::path log_path = dir / "metrics.jsonl";
  fs::remove(log_path);
  training::MetricsLog log(log_path);

  const corpus::Corpus all = load_corpus_at(c.corpus);
  require(all.sample_rate() == c.model.spectral.sample_rate,
          "corpus sample rate " + std::to_string(all.sample_rate()) + " differs from model sample rate " +
              std::to_string(c.model.spectral.sample_rate));
  const auto [train_corpus, val_corpus] = training::split_corpus(all, c.seed);
  const training::TrainData data{train_corpus, val_corpus};
  const auto& sc = c.model.spectral;

  json meta{{"regime", name}, {"config_hash", config_hash(c)}, {"seed", c.seed}, {"lr", plan.lr}};
  std::optional<Model> model;
  std::vector<Instrument> insts;

  switch (r) {
    case Regime::mss: {
      insts = plan_instruments(plan, kCascadeInstruments);
      auto m = training::make_cascade_model(c.model, insts, c.seed);
      const auto reports = training::train_mss(plan, sc, data, m, &log);
      json per = json::object();
      double val = 0.0;
      int epoch = 0;
      for (const auto& [i, rep] : reports) {
        per[std::string(to_string(i))] = report_json(rep);
        val += rep.best_val_loss() / static_cast<double>(reports.size());
        epoch = std::max(epoch, rep.best_epoch);
      }
      meta["per_instrument"] = per;
      meta["validation_loss"] = val;
      meta["epoch"] = epoch;
      model = std::move(m);
      break;
    }
    case Regime::clean: {
      insts = plan_instruments(plan, kAllInstruments);
      auto m = training::make_clean_model(c.model, insts, c.seed);
      const auto reports = training::train_clean(plan, sc, data, m, &log);
      json per = json::object();
      double val = 0.0;
      int epoch = 0;
      for (const auto& [i, rep] : reports) {
        per[std::string(to_string(i))] = report_json(rep);
        val += rep.best_val_loss() / static_cast<double>(reports.size());
        epoch = std::max(epoch, rep.best_epoch);
      }
      meta["per_instrument"] = per;
      meta["validation_loss"] = val;
      meta["epoch"] = epoch;
      model = std::move(m);
      break;
    }
    case Regime::cascade:
    case Regime::cascade_ft:
    case Regime::cascade_paft: {
      const std::string src = r == Regime::cascade ? "mss" : "cascade";
      LoadedModel base = load_model(c, src);
      auto m = std::move(std::get<training::CascadeModel>(base.model));
      insts = instruments_of(base.meta);
      training::TrainPlan p = plan;
      if (p.instruments.empty()) p.instruments = insts;
      training::TrainReport rep;
      if (r == Regime::cascade) {
        rep = training::train_cascade_extractors(p, sc, data, m, &log);
      } else if (r == Regime::cascade_ft) {
        rep = training::finetune_e2e(p, sc, data, m, &log);
      } else {
        const auto source = paft_source(c, all, insts, corpus::PaftInput::pseudo, meta);
        rep = training::run_paft(p, sc, source, m, &log);
      }
      meta.update(report_json(rep));
      model = std::move(m);
      break;
    }
    case Regime::direct_pretrain: {
      LoadedModel clean = load_model(c, "clean");
      auto m = training::make_direct_model(c.model, c.seed);
      const auto rep =
          training::pretrain_direct(plan, sc, data, std::get<training::CleanModel>(clean.model), m, &log);
      meta.update(report_json(rep));
      insts.assign(kAllInstruments.begin(), kAllInstruments.end());
      model = std::move(m);
      break;
    }
    case Regime::direct_multitask: {
      LoadedModel base = load_model(c, "direct_pretrain");
      auto m = std::move(std::get<training::DirectModel>(base.model));
      const auto rep = training::train_direct_multitask(plan, sc, data, m, &log);
      meta.update(report_json(rep));
      insts.assign(kAllInstruments.begin(), kAllInstruments.end());
      model = std::move(m);
      break;
    }
    case Regime::paft: {
      LoadedModel base = load_model(c, c.paft_base);
      insts = instruments_of(base.meta);
      meta["base"] = c.paft_base;
      const auto input = model_kind(c.paft_base, base.meta) == "clean" ? corpus::PaftInput::clean
                                                                       : corpus::PaftInput::pseudo;
      const auto source = paft_source(c, all, insts, input, meta);
      training::TrainReport rep;
      std::visit([&](auto& m) { rep = training::run_paft(plan, sc, source, m, &log); }, base.model);
      meta.update(report_json(rep));
      model = std::move(base.model);
      break;
    }
  }
  meta["instruments"] = instruments_json(insts);
  meta["metrics_log"] = log_path.filename().string();
  meta["param_hash"] = hex64(nets::param_hash(params_of(*model, name)));

  nets::save_params(dir / "params.bin", params_of(*model, name));
  std::ofstream os(dir / "meta.json");
  require(static_cast<bool>(os), "cannot write " + (dir / "meta.json").string());
  os << meta.dump(2) << '\n';
  if (progress) *progress << name << ": wrote " << dir.string() << '\n';
  return {dir, meta};
}

// ---------------------------------------------------------------------------
// eval

std::string format_db(double db) {
  if (std::isinf(db)) return db > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << db;
  return os.str();
}

namespace {

std::unique_ptr<training::Embedder> embedder_for(const Model& m, const training::SpectralConfig& sc) {
  if (const auto* x = std::get_if<training::CleanModel>(&m)) return std::make_unique<training::CleanEmbedder>(*x, sc);
  if (const auto* x = std::get_if<training::CascadeModel>(&m))
    return std::make_unique<training::CascadeEmbedder>(*x, sc);
  return std::make_unique<training::DirectEmbedder>(std::get<training::DirectModel>(m), sc);
}

/// One-hot embedding of `label` over a fixed label list.
std::vector<double> one_hot(const std::vector<std::string>& labels, const std::string& label) {
  std::vector<double> v(labels.size(), 0.0);
  const auto it = std::find(labels.begin(), labels.end(), label);
  require(it != labels.end(), "oracle embedding: unknown label " + label);
  v[static_cast<std::size_t>(it - labels.begin())] = 1.0;
  return v;
}

eval::EmbeddingIndex index_segments(const RunConfig& c, const std::vector<eval::TestSegment>& segs,
                                    std::vector<eval::EmbeddingRow>* rows_out) {
  const Instrument inst = c.eval.instrument;
  std::optional<LoadedModel> loaded;
  std::unique_ptr<training::Embedder> emb;
  std::vector<std::string> labels;
  if (c.eval.oracle_onehot) {
    std::set<std::string> s;
    for (const auto& t : segs) s.insert(t.label);
    labels.assign(s.begin(), s.end());
  } else {
    loaded = load_model(c, c.eval.model);
    emb = embedder_for(loaded->model, c.model.spectral);
  }
  eval::EmbeddingIndex idx(emb && emb->disentangled());
  for (const auto& t : segs) {
    eval::EmbeddingRow row{t.piece_id, t.segment_index, inst, t.label, t.shape_label, {}};
    row.vector = emb ? emb->embed(t.example.audio, inst) : one_hot(labels, t.label);
    if (rows_out) rows_out->push_back(row);
    idx.add(std::move(row));
  }
  return idx;
}

fs::path eval_dir(const RunConfig& c) {
  const fs::path d = c.out_dir / "eval";
  fs::create_directories(d);
  return d;
}

std::string model_tag(const RunConfig& c) { return c.eval.oracle_onehot ? "oracle" : c.eval.model; }

void write_report(const fs::path& p, const json& j) {
  std::ofstream os(p);
  require(static_cast<bool>(os), "cannot write " + p.string());
  os << j.dump(2) << '\n';
}

json eval_sdr(const RunConfig& c, std::ostream& out) {
  const auto& e = c.eval;
  require(!e.sdr_estimate.empty() && !e.sdr_reference.empty(),
          "sdr: set eval.sdr_estimate and eval.sdr_reference");
  const auto est = dsp::read_wav(e.sdr_estimate);
  const auto ref = dsp::read_wav(e.sdr_reference);
  require(est.samples.size() == ref.samples.size(), "sdr: files differ in length");
  const double sdr = dsp::global_sdr(est, ref);
  out << "sdr " << format_db(sdr) << " dB\n";
  return {{"metric", "sdr"}, {"estimate", e.sdr_estimate.string()}, {"reference", e.sdr_reference.string()},
          {"value", format_db(sdr)}};
}

}  // namespace

json cmd_eval(const RunConfig& c, const std::string& metric, std::ostream& out) {
  static const std::set<std::string> known{"mes-normal", "mes-pseudo", "abx", "sdr", "export-embed"};
  require(known.count(metric) == 1, "unknown metric '" + metric + "' (expected mes-normal, mes-pseudo, abx, sdr "
                                    "or export-embed)");
  const Instrument inst = c.eval.instrument;
  const std::string iname(to_string(inst));
  json report;
  if (metric == "sdr") {
    report = eval_sdr(c, out);
  } else if (metric == "abx") {
    const auto records = load_records(c);
    const std::vector<ABXRecord> scored =
        c.eval.abx_subset == "test" ? eval::abx_split(records, 0.7, c.seed).test : records;
    const corpus::Corpus corp = load_corpus_at(c.corpus);
    LoadedModel m = load_model(c, c.eval.model);
    const auto emb = embedder_for(m.model, c.model.spectral);
    std::map<std::string, eval::ABXEmbedding> embs;
    for (const auto& r : scored) {
      if (r.instrument != inst || !eval::passes_consensus(r, c.eval.min_consensus)) continue;
      const auto e = [&](const corpus::SegmentRef& s) { return emb->embed(corpus::extract_segment(corp, s), inst); };
      embs[r.record_id] = {e(r.x), e(r.a), e(r.b)};
    }
    eval::AbxOptions o;
    o.min_consensus = c.eval.min_consensus;
    o.instrument = inst;
    o.subspace_masked = emb->disentangled();
    o.per_response = c.eval.per_response;
    report = json::array();
    for (auto cond : {std::optional<ABXCondition>{}, std::optional<ABXCondition>{ABXCondition::all_diff},
                      std::optional<ABXCondition>{ABXCondition::one_shared}}) {
      o.condition = cond;
      const std::string cname = cond ? std::string(to_string(*cond)) : "all";
      try {
        const auto s = eval::abx_agreement(scored, embs, o);
        report.push_back(eval::metric_report("abx", inst, cname, s.agreement, s.ci, s.n));
        out << "abx " << iname << ' ' << cname << ' ' << std::fixed << std::setprecision(4) << s.agreement << " ["
            << s.ci.low << ", " << s.ci.high << "] n=" << s.n << '\n';
      } catch (const Error&) {
        if (!cond) throw;
      }
    }
  } else {
    const corpus::Corpus corp = load_corpus_at(c.test_corpus.empty() ? c.corpus : c.test_corpus);
    if (metric == "mes-normal") {
      const auto idx = index_segments(c, eval::render_mes_normal(corp, c.eval.mes_segment_s), nullptr);
      const auto s = eval::mes_normal(idx, inst);
      report = eval::metric_report("mes-normal", inst, "normal", s.accuracy, eval::clopper_pearson(s.correct, s.n),
                                   s.n);
    } else if (metric == "mes-pseudo") {
      const auto set = eval::build_mes_pseudo_set(corp, inst, c.seed);
      const auto idx = index_segments(c, eval::render_mes_pseudo(corp, set, c.eval.mes_segment_s), nullptr);
      const auto s = eval::mes_pseudo(idx, inst);
      report = eval::metric_report("mes-pseudo", inst, "pseudo", s.accuracy, eval::clopper_pearson(s.correct, s.n),
                                   s.n);
    } else {
      const auto vis = eval::build_visualization_set(corp, inst, c.seed, c.eval.abx_segment_s);
      std::vector<eval::EmbeddingRow> rows;
      index_segments(c, vis.segments, &rows);
      const fs::path p = eval_dir(c) / ("embeddings_" + model_tag(c) + "_" + iname + ".csv");
      eval::export_embeddings(rows, p);
      report = {{"metric", "export-embed"}, {"instrument", iname}, {"rows", rows.size()}, {"path", p.string()}};
      out << "export-embed " << iname << ' ' << rows.size() << " rows -> " << p.string() << '\n';
    }
    if (report.contains("value"))
      out << metric << ' ' << iname << ' ' << model_tag(c) << ' ' << std::fixed << std::setprecision(4)
          << report["value"].get<double>() << " (n=" << report["n"].get<int>() << ")\n";
  }
  write_report(eval_dir(c) / (metric + "_" + model_tag(c) + "_" + iname + ".json"), report);
  return report;
}

}  // namespace inmsrl::pipeline
