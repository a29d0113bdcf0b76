#include <doctest.h>

#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "inmsrl/abx.hpp"
#include "inmsrl/corpus.hpp"

using namespace inmsrl;
using namespace inmsrl::corpus;
using nlohmann::json;

namespace {

void write_json(const std::filesystem::path& p, const json& j) { std::ofstream(p) << j.dump(); }

Piece piece_of(const std::string& id, double seconds, int sr = 8000) {
  std::array<dsp::Waveform, kNumInstruments> stems;
  for (auto& s : stems) s = {std::vector<float>(static_cast<std::size_t>(seconds * sr), 0.1f), sr};
  return {id, make_stem_set(std::move(stems))};
}

}  // namespace

TEST_CASE("manifest loading") {
  const auto dir = fixtures::scratch("manifest");
  const auto sc = synth_corpus(2, 1.0, 1, 8000);
  write_synth_corpus(sc, dir / "data");
  const auto m = load_manifest(dir / "data" / "manifest.json");
  CHECK(m.pieces.size() == 2);
  CHECK(load_corpus(m).size() == 2);

  SUBCASE("missing stem names piece and instrument") {
    auto j = json::parse(std::ifstream(dir / "data" / "manifest.json"));
    j["pieces"][1]["stems"].erase("bass");
    write_json(dir / "data" / "bad.json", j);
    try {
      load_manifest(dir / "data" / "bad.json");
      FAIL("expected an error");
    } catch (const Error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("piece_001") != std::string::npos);
      CHECK(msg.find("bass") != std::string::npos);
    }
  }
  SUBCASE("empty manifest") {
    write_json(dir / "empty.json", json{{"pieces", json::array()}});
    CHECK_THROWS_AS(load_manifest(dir / "empty.json"), Error);
  }
  SUBCASE("duplicate id") {
    auto j = json::parse(std::ifstream(dir / "data" / "manifest.json"));
    j["pieces"][1]["id"] = j["pieces"][0]["id"];
    write_json(dir / "data" / "dup.json", j);
    CHECK_THROWS_AS(load_manifest(dir / "data" / "dup.json"), Error);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("stem set mix and gain") {
  std::array<dsp::Waveform, kNumInstruments> stems;
  for (auto& s : stems) s = {std::vector<float>(10, 0.1f), 8000};
  const auto quiet = make_stem_set(stems);
  CHECK(quiet.gain == 1.0);
  CHECK(quiet.mix.samples[0] == doctest::Approx(0.5));
  for (auto& s : stems) s.samples.assign(10, 0.5f);
  const auto loud = make_stem_set(stems);
  CHECK(loud.gain == doctest::Approx(1.0 / 2.5));
  float peak = 0;
  for (float v : loud.mix.samples) peak = std::max(peak, std::abs(v));
  CHECK(peak <= 1.0f);
  CHECK(loud.scaled_stem(Instrument::bass).samples[0] == doctest::Approx(0.2));
}

TEST_CASE("synth_corpus") {
  const auto a = synth_corpus(4, 2.0, 9, 8000), b = synth_corpus(4, 2.0, 9, 8000);
  for (std::size_t p = 0; p < 4; ++p)
    for (Instrument i : kAllInstruments) CHECK(a.corpus.at(p).audio.stem(i).samples == b.corpus.at(p).audio.stem(i).samples);
  CHECK_THROWS_AS(synth_corpus(0, 2.0, 9, 8000), Error);
  CHECK_THROWS_AS(synth_corpus(1, 2.0, 9, 8000), Error);

  const auto c = synth_corpus(20, 1.0, 7, 8000);
  for (std::size_t x = 0; x < c.params.size(); ++x)
    for (std::size_t y = x + 1; y < c.params.size(); ++y) CHECK(c.params[x].drum_ioi_s != c.params[y].drum_ioi_s);
}

TEST_CASE("slice_segments") {
  CHECK(slice_segments(piece_of("p", 30.0), 3.0, 3.0).size() == 10);
  CHECK(slice_segments(piece_of("p", 10.0), 10.0, 10.0).size() == 1);
  CHECK(slice_segments(piece_of("p", 9.5), 3.0, 3.0).size() == 3);
  CHECK_THROWS_AS(slice_segments(piece_of("p", 2.0), 3.0, 3.0), Error);
}

TEST_CASE("is_silent") {
  CHECK(is_silent(std::vector<float>(100, 0.0f)));
  std::vector<float> sine(800);
  for (std::size_t i = 0; i < sine.size(); ++i) sine[i] = static_cast<float>(std::sin(0.1 * i));
  CHECK_FALSE(is_silent(sine));
  // Constant signal with RMS exactly 10^(-60/20) = 1e-3.
  CHECK_FALSE(is_silent(std::vector<float>(100, 1e-3f), 20.0 * std::log10(double(1e-3f))));
  CHECK(is_silent(std::vector<float>(100, 1e-3f), 20.0 * std::log10(double(1e-3f)) + 1e-9));
}

TEST_CASE("S4 triplets") {
  const auto& c = fixtures::small_corpus();
  const SegmentTable table(c, 3.0);
  Rng rng(3);
  for (int n = 0; n < 300; ++n) {
    const auto t = sample_s4_triplet(table, Instrument::drums, rng);
    CHECK(t.anchor.sources[0].piece_id == t.positive.sources[0].piece_id);
    CHECK(t.anchor.sources[0].start != t.positive.sources[0].start);
    CHECK(t.negative.sources[0].piece_id != t.anchor.sources[0].piece_id);
  }
  SUBCASE("two pieces force the negative") {
    const Corpus two = c.subset({c.at(0).id, c.at(1).id});
    const SegmentTable t2(two, 3.0);
    for (int n = 0; n < 50; ++n) {
      const auto t = sample_s4_triplet(t2, Instrument::bass, rng);
      CHECK(t.negative.sources[1].piece_id != t.anchor.sources[1].piece_id);
    }
  }
  SUBCASE("seeded sequence is reproducible") {
    Rng a(11), b(11);
    for (int n = 0; n < 5; ++n) {
      const auto x = sample_s4_triplet(table, Instrument::piano, a), y = sample_s4_triplet(table, Instrument::piano, b);
      CHECK(x.anchor.sources == y.anchor.sources);
      CHECK(x.negative.sources == y.negative.sources);
    }
  }
}

TEST_CASE("pseudo pieces") {
  const auto& c = fixtures::small_corpus();
  const SegmentTable table(c, 3.0);
  Rng rng(4);
  const auto e = make_pseudo_piece(table, Instrument::drums, c.at(1).id, c.at(2).id, rng);
  CHECK(e.sources[0].piece_id == c.at(1).id);
  for (Instrument i : {Instrument::bass, Instrument::piano, Instrument::guitar, Instrument::residuals})
    CHECK(e.sources[index_of(i)].piece_id == c.at(2).id);
  for (std::size_t k = 0; k < e.audio.length(); k += 997) {
    double sum = 0;
    for (Instrument i : kAllInstruments) sum += e.audio.stem(i).samples[k];
    CHECK(e.audio.mix.samples[k] == doctest::Approx(e.audio.gain * sum).epsilon(1e-5));
  }
  const auto same = make_pseudo_piece(table, Instrument::drums, c.at(3).id, c.at(3).id, rng);
  CHECK(same.sources[0].piece_id == same.sources[1].piece_id);
}

TEST_CASE("pseudo triplets") {
  const auto& c = fixtures::small_corpus();
  const SegmentTable table(c, 3.0);
  Rng rng(5);
  for (int n = 0; n < 200; ++n) {
    const Instrument target = kAllInstruments[n % kNumInstruments];
    const auto [basic, additional] = sample_pseudo_triplet(table, target, rng);
    const int t = index_of(target);
    const int o = (t + 1) % kNumInstruments;
    CHECK(basic.target == target);
    CHECK(basic.anchor.sources[t].piece_id == basic.positive.sources[t].piece_id);
    CHECK(basic.anchor.sources[t].piece_id != basic.negative.sources[t].piece_id);
    CHECK(basic.anchor.sources[o].piece_id == basic.negative.sources[o].piece_id);
    CHECK(basic.anchor.sources[o].piece_id != basic.positive.sources[o].piece_id);
    CHECK(additional.target != basic.target);
    CHECK(additional.provenance == Provenance::pseudo_additional);
  }
  const Corpus two = c.subset({c.at(0).id, c.at(1).id});
  const SegmentTable t2(two, 3.0);
  CHECK_THROWS_AS(sample_pseudo_triplet(t2, Instrument::drums, rng), Error);
}

TEST_CASE("combination inputs") {
  const auto& c = fixtures::small_corpus();
  const auto s = extract_segment(c, {c.at(0).id, 0.0, 1.0});
  CHECK(combination_mix(s, CombinationPattern::all()).samples == s.mix.samples);
  const auto d = combination_mix(s, CombinationPattern::only(Instrument::drums));
  CHECK(d.samples == s.scaled_stem(Instrument::drums).samples);
  CHECK_THROWS_AS(combination_mix(s, CombinationPattern{0}), Error);

  Rng rng(6);
  std::array<int, 32> counts{};
  for (int n = 0; n < 31000; ++n) ++counts[sample_combination_input(s, rng).second.bits];
  CHECK(counts[0] == 0);
  double chi2 = 0;
  for (int p = 1; p < 32; ++p) {
    CHECK(counts[p] > 0);
    chi2 += (counts[p] - 1000.0) * (counts[p] - 1000.0) / 1000.0;
  }
  CHECK(chi2 < 50.89218131151707);  // 0.99 quantile of chi-square with 30 dof
}

TEST_CASE("PAFT triplets from ABX records") {
  const auto& c = fixtures::small_corpus();
  const SegmentTable table(c, 5.0);
  const auto seg = [&](int p, double start) { return SegmentRef{c.at(p).id, start, 5.0}; };
  ABXRecord r{"r1", Instrument::drums, ABXCondition::all_diff, seg(0, 0), seg(1, 5), seg(2, 0), 3, 0};
  ABXRecord tie{"r2", Instrument::drums, ABXCondition::all_diff, seg(0, 0), seg(1, 0), seg(2, 5), 2, 2};
  ABXRecord other{"r3", Instrument::bass, ABXCondition::all_diff, seg(0, 0), seg(1, 0), seg(2, 5), 2, 1};
  Rng rng(7);
  const auto clean = build_paft_triplets({r, tie, other}, Instrument::drums, table, PaftInput::clean, rng);
  REQUIRE(clean.triplets.size() == 1);
  CHECK(clean.ties_excluded == 1);
  const auto& t = clean.triplets[0];
  CHECK(t.positive.sources[0] == r.a);
  CHECK(t.negative.sources[0] == r.b);
  for (Instrument i : {Instrument::bass, Instrument::piano, Instrument::guitar, Instrument::residuals})
    for (float v : t.anchor.audio.stem(i).samples) REQUIRE(v == 0.0f);

  const auto pseudo = build_paft_triplets({r}, Instrument::drums, table, PaftInput::pseudo, rng);
  REQUIRE(pseudo.triplets.size() == 1);
  const auto& u = pseudo.triplets[0];
  CHECK(u.anchor.sources[0] == r.x);
  CHECK(u.positive.sources[0] == r.a);
  CHECK(u.anchor.sources[1].piece_id != r.x.piece_id);
  CHECK(u.anchor.sources[1].piece_id == u.negative.sources[1].piece_id);
}

TEST_CASE("ABX record validation and JSON-lines") {
  ABXRecord r{"x", Instrument::piano, ABXCondition::one_shared, {"p0", 0, 5}, {"p0", 5, 5}, {"p1", 0, 5}, 4, 1};
  CHECK_NOTHROW(validate(r));
  CHECK(r.consensus() == doctest::Approx(0.8));
  ABXRecord bad = r;
  bad.b.piece_id = "p0";
  CHECK_THROWS_AS(validate(bad), Error);
  bad = r;
  bad.votes_a = bad.votes_b = 0;
  CHECK_THROWS_AS(validate(bad), Error);

  const auto dir = fixtures::scratch("abx_io");
  write_abx_jsonl(dir / "r.jsonl", {r});
  const auto back = read_abx_jsonl(dir / "r.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(back[0].a == r.a);
  CHECK(back[0].votes_b == 1);
  std::ofstream(dir / "bad.jsonl") << "{\"record_id\": 1}\n";
  CHECK_THROWS_AS(read_abx_jsonl(dir / "bad.jsonl"), Error);
  std::filesystem::remove_all(dir);
}
