#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "inmsrl/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace inmsrl;

namespace {

struct Run {
  int status;
  std::string output;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(INMSRL_BIN) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
  const int st = pclose(p);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<json> metrics_without_time(const fs::path& p) {
  std::vector<json> out;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);) {
    auto j = json::parse(line);
    REQUIRE(j.contains("timestamp"));
    j.erase("timestamp");
    out.push_back(j);
  }
  return out;
}

// Tiny corpus and config shared by the CLI cases.
struct Workspace {
  fs::path dir;
  Workspace() : dir(fixtures::scratch("cli")) {
    REQUIRE(run("synth-data -n 6 --duration 8 --seed 2 -o " + (dir / "data").string()).status == 0);
    REQUIRE(run("synth-data -n 40 --duration 2 --seed 3 -o " + (dir / "test").string()).status == 0);
    std::ofstream(dir / "cfg.json") << R"({
      "corpus": "data/manifest.json", "test_corpus": "test/manifest.json", "out_dir": "runs", "seed": 1,
      "model": {"window": 128, "hop": 64, "n_mels": 16, "mss_depth": 2, "mss_channels": 4,
                "extractor_depth": 2, "extractor_channels": 4, "direct_depth": 2, "direct_channels": 5},
      "train": {"max_epochs": 2, "patience": 2, "steps_per_epoch": 1, "batch_size": 2, "val_examples": 2,
                "segment_s": 1.0, "instruments": ["drums"]},
      "eval": {"mes_segment_s": 1.0, "instrument": "drums"}
    })";
  }
  std::string cfg() const { return "--config " + (dir / "cfg.json").string(); }
};

const Workspace& ws() {
  static const Workspace w;
  return w;
}

}  // namespace

TEST_CASE("synth-data") {
  const auto dir = fixtures::scratch("cli_synth");
  REQUIRE(run("synth-data -n 20 --duration 1 --seed 4 -o " + (dir / "a").string()).status == 0);
  REQUIRE(run("synth-data -n 20 --duration 1 --seed 4 -o " + (dir / "b").string()).status == 0);
  const auto m = json::parse(slurp(dir / "a" / "manifest.json"));
  REQUIRE(m["pieces"].size() == 20);
  for (const auto& p : m["pieces"]) {
    CHECK(p["stems"].size() == 5);
    for (const auto& [inst, path] : p["stems"].items()) {
      const std::string rel = path.get<std::string>();
      CHECK(slurp(dir / "a" / rel) == slurp(dir / "b" / rel));
    }
  }
  CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));

  const auto one = run("synth-data -n 1 -o " + (dir / "c").string());
  CHECK(one.status != 0);
  CHECK(one.output.find("error:") != std::string::npos);
  CHECK(run("synth-data -n 2 --duration 1 -o " + (dir / "a").string()).status != 0);
  CHECK(run("synth-data -n 2 --duration 1 --force -o " + (dir / "a").string()).status == 0);
  fs::remove_all(dir);
}

TEST_CASE("regime dependencies are checked") {
  const auto r = run("train " + ws().cfg() + " --regime cascade_ft");
  CHECK(r.status != 0);
  CHECK(r.output.find("requires train_mss") != std::string::npos);
  CHECK(run("train " + ws().cfg() + " --regime bogus").status != 0);
}

TEST_CASE("training writes checkpoints with the config hash and reruns identically") {
  const auto& w = ws();
  REQUIRE(run("train " + w.cfg() + " --regime mss --force").status == 0);
  const auto meta = json::parse(slurp(w.dir / "runs" / "mss" / "meta.json"));
  const auto cfg = pipeline::load_config(w.dir / "cfg.json");
  CHECK(meta["config_hash"] == pipeline::config_hash(cfg));
  CHECK(meta["regime"] == "mss");
  CHECK(fs::exists(w.dir / "runs" / "mss" / "params.bin"));

  const auto first = metrics_without_time(w.dir / "runs" / "mss" / "metrics.jsonl");
  const auto params = slurp(w.dir / "runs" / "mss" / "params.bin");
  CHECK(run("train " + w.cfg() + " --regime mss").status != 0);  // exists without --force
  REQUIRE(run("train " + w.cfg() + " --regime mss --force").status == 0);
  CHECK(metrics_without_time(w.dir / "runs" / "mss" / "metrics.jsonl") == first);
  CHECK(slurp(w.dir / "runs" / "mss" / "params.bin") == params);

  REQUIRE(run("train " + w.cfg() + " --regime cascade --force").status == 0);
  REQUIRE(run("train " + w.cfg() + " --regime cascade_ft --force").status == 0);
  const auto ft = json::parse(slurp(w.dir / "runs" / "cascade_ft" / "meta.json"));
  CHECK(ft["counters"]["separation_evals"].get<long>() > 0);
  const auto mes = run("eval mes-normal " + w.cfg() + " --regime cascade_ft");
  CHECK(mes.status == 0);
  CHECK(fs::exists(w.dir / "runs" / "eval" / "mes-normal_cascade_ft_drums.json"));
}

TEST_CASE("evaluation commands") {
  const auto& w = ws();
  const auto oracle = run("eval mes-pseudo " + w.cfg() + " --oracle-onehot");
  REQUIRE(oracle.status == 0);
  const auto rep = json::parse(slurp(w.dir / "runs" / "eval" / "mes-pseudo_oracle_drums.json"));
  CHECK(rep["value"].get<double>() == 1.0);

  const auto abx = run("eval abx " + w.cfg() + " --oracle-onehot");
  CHECK(abx.status != 0);
  CHECK(abx.output.find("error:") != std::string::npos);

  const auto wav = (w.dir / "data" / "piece_000" / "drums.wav").string();
  const auto sdr = run("eval sdr " + w.cfg() + " --estimate " + wav + " --reference " + wav);
  CHECK(sdr.status == 0);
  CHECK(sdr.output.find("inf") != std::string::npos);

  CHECK(run("eval nonsense " + w.cfg()).status != 0);
}

TEST_CASE("synth-abx feeds paft and abx evaluation") {
  const auto& w = ws();
  std::ofstream(w.dir / "cfg_abx.json") << R"({
    "corpus": "data/manifest.json", "abx_records": "abx/records.jsonl", "out_dir": "runs_abx", "seed": 4,
    "paft_base": "clean",
    "model": {"window": 128, "hop": 64, "n_mels": 16, "mss_depth": 2, "mss_channels": 4,
              "extractor_depth": 2, "extractor_channels": 4, "direct_depth": 2, "direct_channels": 5},
    "train": {"max_epochs": 1, "patience": 1, "paft_epochs": 2, "steps_per_epoch": 1, "batch_size": 2,
              "val_examples": 2, "segment_s": 1.0, "instruments": ["drums"]},
    "eval": {"abx_segment_s": 2.0, "instrument": "drums"}
  })";
  const std::string cfg = "--config " + (w.dir / "cfg_abx.json").string();
  REQUIRE(run("synth-abx " + cfg + " -n 20 --force").status == 0);
  const auto records = read_abx_jsonl(w.dir / "abx" / "records.jsonl");
  CHECK(records.size() == 20);
  CHECK(run("synth-abx " + cfg + " -n 20").status != 0);  // exists without --force

  REQUIRE(run("train " + cfg + " --regime clean --force").status == 0);
  const auto paft = run("train " + cfg + " --regime paft --force");
  REQUIRE(paft.status == 0);
  const auto meta = json::parse(slurp(w.dir / "runs_abx" / "paft" / "meta.json"));
  CHECK(meta["epochs_run"] == 2);
  CHECK(meta["abx_train_records"] == 14);
  const auto abx = run("eval abx " + cfg + " --regime paft");
  CHECK(abx.status == 0);
  CHECK(fs::exists(w.dir / "runs_abx" / "eval" / "abx_paft_drums.json"));
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(pipeline::config_from_json(json{{"bogus", 1}}), Error);
  CHECK_THROWS_AS(pipeline::config_from_json(json{{"train", {{"lr_typo", 1}}}}), Error);
  CHECK_THROWS_AS(pipeline::config_from_json(json{{"model", {{"direct_channels", 4}}}}), Error);
  const auto a = pipeline::config_from_json(json{{"seed", 1}});
  auto b = a;
  b.out_dir = "elsewhere";
  CHECK(pipeline::config_hash(a) == pipeline::config_hash(b));
  b.seed = 2;
  CHECK(pipeline::config_hash(a) != pipeline::config_hash(b));
  CHECK(pipeline::format_db(std::numeric_limits<double>::infinity()) == "inf");
}
