#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "inmsrl/eval.hpp"
#include "inmsrl/training.hpp"

using namespace inmsrl;
using namespace inmsrl::training;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.spectral = {8000, 128, 64, 16};
  c.mss = {2, 4};
  c.extractor = {2, 4};
  c.direct = {2, 5};
  return c;
}

TrainPlan tiny_plan(Regime r, int epochs = 2) {
  TrainPlan p = default_plan(r);
  p.max_epochs = epochs;
  p.patience = epochs;
  p.paft_epochs = epochs;
  p.batch_size = 2;
  p.steps_per_epoch = 2;
  p.val_examples = 2;
  p.segment_s = 1.0;
  p.seed = 3;
  return p;
}

struct Split {
  corpus::Corpus train, val;
};

const Split& split() {
  static const Split s = [] {
    auto [t, v] = split_corpus(fixtures::small_corpus(), 1);
    return Split{std::move(t), std::move(v)};
  }();
  return s;
}

TrainData data() { return {split().train, split().val}; }

std::vector<std::vector<double>> grads(const nets::ParamList& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& p : ps) out.push_back(p.var.grad().empty() ? std::vector<double>(p.var.size(), 0.0) : p.var.grad());
  return out;
}

corpus::Triplet one_triplet(Instrument target, std::uint64_t seed) {
  const corpus::SegmentTable table(fixtures::small_corpus(), 1.0);
  corpus::Rng rng(seed);
  return corpus::sample_pseudo_triplet(table, target, rng).basic;
}

}  // namespace

TEST_CASE("triplet loss examples") {
  const std::vector<double> a{0, 0}, p{1, 0}, n{0, 2};
  CHECK(triplet_loss(a, p, n, 0.5) == 0.0);
  CHECK(triplet_loss(a, p, n, 1.5) == doctest::Approx(0.5));
  CHECK(triplet_loss(a, a, a, 1.0) == doctest::Approx(1.0));
  const auto v = triplet_loss(ag::Var::constant({2}, a), ag::Var::constant({2}, p), ag::Var::constant({2}, n), 1.5);
  CHECK(v.item() == doctest::Approx(0.5));
}

TEST_CASE("triplet loss is invariant to rotation and translation") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  const double th = 0.7;
  for (int k = 0; k < 50; ++k) {
    std::vector<double> a(2), p(2), n(2);
    for (auto* v : {&a, &p, &n}) (*v) = {g(rng), g(rng)};
    auto move = [&](const std::vector<double>& x) {
      return std::vector<double>{std::cos(th) * x[0] - std::sin(th) * x[1] + 3.0,
                                 std::sin(th) * x[0] + std::cos(th) * x[1] - 1.0};
    };
    CHECK(triplet_loss(move(a), move(p), move(n), 1.0) == doctest::Approx(triplet_loss(a, p, n, 1.0)));
  }
}

TEST_CASE("reconstruction losses") {
  dsp::MagnitudeSpectrogram x, y;
  x.frames = y.frames = 2;
  x.bins = y.bins = 2;
  x.data = {1, 2, 3, 4};
  y.data = {1, 0, 3, 8};
  CHECK(l1_loss(x, y) == doctest::Approx(1.5));
  CHECK(mse_loss(std::vector<double>{1, 2}, std::vector<double>{3, 2}) == doctest::Approx(2.0));
  y.bins = 1;
  CHECK_THROWS_AS(l1_loss(x, y), Error);
}

TEST_CASE("early stopping") {
  CHECK_FALSE(early_stopper(std::vector<double>{3, 2, 1}, 2).stop);
  const auto d = early_stopper(std::vector<double>{5, 4, 3, 3, 3}, 2);
  CHECK(d.best_epoch == 2);
  CHECK(d.stop);
  const auto e = early_stopper(std::vector<double>{1, 1, 1}, 2);
  CHECK(e.best_epoch == 0);
  CHECK(e.stop);
  CHECK_FALSE(early_stopper(std::vector<double>{1, 1}, 2).stop);
  CHECK_THROWS_AS(early_stopper(std::vector<double>{}, 2), Error);
}

TEST_CASE("Adam") {
  // The first bias-corrected step moves every coordinate by lr * sign(grad).
  auto w = ag::Var::parameter({3}, {1.0, -2.0, 0.5});
  auto frozen = ag::Var::parameter({1}, {4.0});
  Adam opt({{"w", w}, {"f", frozen}}, 0.01);
  frozen.set_requires_grad(false);
  ag::backward(ag::sum(ag::mul_const(w, std::vector<double>{3.0, -0.5, 1e-3})));
  opt.step();
  CHECK(w.value()[0] == doctest::Approx(0.99).epsilon(1e-9));
  CHECK(w.value()[1] == doctest::Approx(-1.99).epsilon(1e-9));
  CHECK(w.value()[2] == doctest::Approx(0.49).epsilon(1e-6));
  CHECK(frozen.value()[0] == 4.0);
  CHECK_THROWS_AS(Adam({}, 0.0), Error);
}

TEST_CASE("plans") {
  CHECK(default_lr(Regime::mss) == 1e-4);
  CHECK(default_lr(Regime::cascade_ft) == 1e-5);
  CHECK(default_lr(Regime::clean) == 5e-5);
  for (auto r : {Regime::mss, Regime::clean, Regime::cascade, Regime::cascade_ft, Regime::cascade_paft,
                 Regime::direct_pretrain, Regime::direct_multitask, Regime::paft})
    CHECK(regime_from_string(to_string(r)) == r);
  CHECK_THROWS_AS(regime_from_string("nope"), Error);
  TrainPlan p = default_plan(Regime::clean);
  p.patience = p.max_epochs + 1;
  CHECK_THROWS_AS(validate(p), Error);
}

TEST_CASE("corpus split") {
  const auto sc = corpus::synth_corpus(20, 0.5, 1, 8000);
  const auto [t, v] = split_corpus(sc.corpus, 2);
  CHECK(v.size() == 4);
  CHECK(t.size() == 16);
  const auto [t6, v6] = split_corpus(fixtures::small_corpus(), 2);
  CHECK(v6.size() == 3);
  CHECK(t6.size() == 3);
  CHECK_THROWS_AS(split_corpus(sc.corpus.subset({sc.corpus.at(0).id, sc.corpus.at(1).id, sc.corpus.at(2).id,
                                                 sc.corpus.at(3).id, sc.corpus.at(4).id}),
                               2),
                  Error);
}

TEST_CASE("separation term") {
  const auto cfg = tiny_config();
  const auto t = one_triplet(Instrument::drums, 4);
  auto m1 = make_cascade_model(cfg, std::vector<Instrument>{Instrument::drums}, 5);
  auto m0 = m1.clone();

  const auto with = cascade_triplet_terms(m1, t, cfg.spectral, 1.0, 1.0);
  const auto without = cascade_triplet_terms(m0, t, cfg.spectral, 1.0, 0.0);
  CHECK(with.separation_evals == 3);
  CHECK(without.separation_evals == 0);
  CHECK(with.triplet == doctest::Approx(without.triplet));
  CHECK(with.total.item() == doctest::Approx(with.triplet + with.separation));
  CHECK(without.total.item() == doctest::Approx(without.triplet));

  nets::zero_grad(m1.params());
  nets::zero_grad(m0.params());
  ag::backward(with.total);
  ag::backward(without.total);
  // The separation loss reaches the separator but never the extractor.
  const auto e1 = grads(m1.extractor_params()), e0 = grads(m0.extractor_params());
  for (std::size_t k = 0; k < e1.size(); ++k)
    for (std::size_t j = 0; j < e1[k].size(); ++j) REQUIRE(e1[k][j] == doctest::Approx(e0[k][j]).epsilon(1e-9));
  const auto s1 = grads(m1.mss_params()), s0 = grads(m0.mss_params());
  double diff = 0;
  for (std::size_t k = 0; k < s1.size(); ++k)
    for (std::size_t j = 0; j < s1[k].size(); ++j) diff += std::abs(s1[k][j] - s0[k][j]);
  CHECK(diff > 0.0);
}

TEST_CASE("reconstruction term") {
  const auto cfg = tiny_config();
  const auto t = one_triplet(Instrument::bass, 6);
  auto m = make_direct_model(cfg, 7);
  const auto pat = corpus::CombinationPattern{0b00011};
  const auto r1 = direct_triplet_terms(m, t, cfg.spectral, 1.0, 1.0, pat);
  CHECK(r1.reconstruction > 0.0);
  CHECK(r1.total.item() == doctest::Approx(r1.triplet + r1.reconstruction));

  auto m0 = m.clone();
  nets::zero_grad(m0.params());
  const auto r0 = direct_triplet_terms(m0, t, cfg.spectral, 1.0, 0.0, pat);
  CHECK(r0.reconstruction == 0.0);
  CHECK(r0.total.item() == doctest::Approx(r1.triplet));
  ag::backward(r0.total);
  for (const auto& g : grads(m0.decoder_params()))
    for (double v : g) REQUIRE(v == 0.0);

  // Only the present instruments' decoders receive gradient.
  nets::zero_grad(m.params());
  ag::backward(r1.total);
  for (Instrument i : kAllInstruments) {
    double mag = 0;
    for (const auto& g : grads(m.decoders.at(i).params())) for (double v : g) mag += std::abs(v);
    CHECK((mag > 0.0) == pat.has(i));
  }
}

TEST_CASE("pretraining targets") {
  const auto cfg = tiny_config();
  const auto clean = make_clean_model(cfg, kAllInstruments, 8);
  const auto seg = corpus::extract_segment(fixtures::small_corpus(), {fixtures::small_corpus().at(0).id, 0.0, 1.0});
  const CleanEmbedder emb(clean, cfg.spectral);
  const auto pat = corpus::CombinationPattern{0b10101};
  const auto target = pretrain_target(clean, seg, pat, cfg.spectral);
  REQUIRE(target.size() == 640);
  for (Instrument i : kAllInstruments) {
    const auto [lo, hi] = nets::subspace(640, i);
    const auto e = emb.embed(seg, i);
    for (int k = lo; k < hi; ++k) REQUIRE(target[k] == (pat.has(i) ? doctest::Approx(e[k - lo]) : doctest::Approx(0.0)));
  }
  CHECK_THROWS_AS(pretrain_target(clean, seg, corpus::CombinationPattern{0}, cfg.spectral), Error);
  auto dm = make_direct_model(cfg, 9);
  CHECK(pretrain_loss(dm, seg, pat, target, cfg.spectral).item() > 0.0);
}

TEST_CASE("masked distances ignore other subspaces") {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g;
  std::vector<double> a(640), b(640);
  for (auto& x : a) x = g(rng);
  for (auto& x : b) x = g(rng);
  eval::EmbeddingIndex idx(true);
  idx.add({"a", 0, Instrument::piano, "", "", a});
  idx.add({"b", 0, Instrument::piano, "", "", b});
  const double d = idx.distance(idx.rows()[0], idx.rows()[1], Instrument::piano);
  auto b2 = b;
  const auto [lo, hi] = nets::subspace(640, Instrument::piano);
  for (int k = 0; k < 640; ++k)
    if (k < lo || k >= hi) b2[k] += 5.0 * g(rng);
  idx.add({"c", 0, Instrument::piano, "", "", b2});
  CHECK(idx.distance(idx.rows()[0], idx.rows()[2], Instrument::piano) == doctest::Approx(d));
}

TEST_CASE("stage freezing") {
  const auto cfg = tiny_config();
  const std::vector<Instrument> drums{Instrument::drums};
  auto m = make_cascade_model(cfg, drums, 11);
  const auto mss_before = nets::param_hash(m.mss_params());
  const auto ext_before = nets::param_hash(m.extractor_params());
  auto p = tiny_plan(Regime::cascade);
  p.instruments = drums;
  const auto r = train_cascade_extractors(p, cfg.spectral, data(), m);
  CHECK(nets::param_hash(m.mss_params()) == mss_before);
  CHECK(nets::param_hash(m.extractor_params()) != ext_before);
  CHECK(r.counters.at("basic") > 0);
  CHECK(r.counters.at("additional") > 0);
  for (const auto& np : m.mss_params()) CHECK(np.var.requires_grad());

  auto q = tiny_plan(Regime::cascade_ft, 1);
  q.instruments = drums;
  const auto rf = finetune_e2e(q, cfg.spectral, data(), m);
  CHECK(nets::param_hash(m.mss_params()) != mss_before);
  CHECK(rf.counters.at("separation_evals") % 3 == 0);
  CHECK(rf.counters.at("separation_evals") > 0);
}

TEST_CASE("PAFT runs exactly the configured epochs and keeps decoders frozen") {
  const auto cfg = tiny_config();
  const auto& c = fixtures::small_corpus();
  const corpus::SegmentTable table(c, 1.0);
  eval::OracleOptions o;
  o.records = 12;
  o.duration_s = 1.0;
  const auto records = eval::synth_abx_records(table, Instrument::drums, 2, o);
  corpus::Rng rng(3);
  const auto trip = corpus::build_paft_triplets(records, Instrument::drums, table, corpus::PaftInput::pseudo, rng);
  REQUIRE_FALSE(trip.triplets.empty());

  auto dm = make_direct_model(cfg, 12);
  const auto dec = nets::param_hash(dm.decoder_params());
  const auto ext = nets::param_hash(dm.extractor_params());
  auto p = tiny_plan(Regime::paft, 3);
  const auto r = run_paft(p, cfg.spectral, trip.triplets, dm);
  CHECK(r.epochs_run == 3);
  CHECK(r.train_losses.size() == 3);
  CHECK_FALSE(r.stopped_early);
  CHECK(nets::param_hash(dm.decoder_params()) == dec);
  CHECK(nets::param_hash(dm.extractor_params()) != ext);

  auto cm = make_cascade_model(cfg, std::vector<Instrument>{Instrument::drums}, 13);
  const auto mss = nets::param_hash(cm.mss_params());
  run_paft(p, cfg.spectral, trip.triplets, cm);
  CHECK(nets::param_hash(cm.mss_params()) == mss);
  p.regime = Regime::cascade_paft;
  const auto rc = run_paft(p, cfg.spectral, trip.triplets, cm);
  CHECK(nets::param_hash(cm.mss_params()) != mss);
  CHECK(rc.counters.at("separation_evals") == 3 * 3 * static_cast<long>(trip.triplets.size()));
}

TEST_CASE("redrawn PAFT triplets keep the judged segments and change the accompaniment") {
  const auto& c = fixtures::small_corpus();
  auto table = std::make_shared<const corpus::SegmentTable>(c, 1.0);
  eval::OracleOptions o;
  o.records = 10;
  o.duration_s = 1.0;
  const auto records = eval::synth_abx_records(*table, Instrument::drums, 5, o);
  const std::vector<Instrument> drums{Instrument::drums};

  auto src = redrawn_triplets(records, drums, table, corpus::PaftInput::pseudo, 7);
  const auto e1 = src(1);
  CHECK(src(1) == e1);
  const auto e2 = src(2);
  REQUIRE(e2 != e1);
  REQUIRE(e1->size() == e2->size());
  bool mix_changed = false;
  for (std::size_t k = 0; k < e1->size(); ++k) {
    const auto& a = (*e1)[k];
    const auto& b = (*e2)[k];
    CHECK(a.anchor.audio.stem(Instrument::drums).samples == b.anchor.audio.stem(Instrument::drums).samples);
    CHECK(a.positive.audio.stem(Instrument::drums).samples == b.positive.audio.stem(Instrument::drums).samples);
    mix_changed = mix_changed || a.anchor.audio.mix.samples != b.anchor.audio.mix.samples;
  }
  CHECK(mix_changed);
  CHECK_THROWS_AS(src(4), Error);

  auto clean = redrawn_triplets(records, drums, table, corpus::PaftInput::clean, 7);
  const auto c1 = clean(1);
  CHECK(clean(2) == c1);
  CHECK_THROWS_AS(redrawn_triplets(records, drums, nullptr, corpus::PaftInput::pseudo, 7), Error);
}

TEST_CASE("training is deterministic and reduces validation loss") {
  const auto cfg = tiny_config();
  const std::vector<Instrument> bass{Instrument::bass};
  auto p = tiny_plan(Regime::clean, 6);
  p.lr = 3e-3;
  p.instruments = bass;
  p.pseudo_pieces = false;
  auto a = make_clean_model(cfg, bass, 14), b = make_clean_model(cfg, bass, 14);
  MetricsLog la, lb;
  const auto ra = train_clean(p, cfg.spectral, data(), a, &la);
  train_clean(p, cfg.spectral, data(), b, &lb);
  CHECK(nets::param_hash(a.params()) == nets::param_hash(b.params()));
  REQUIRE(la.records().size() == lb.records().size());
  for (std::size_t k = 0; k < la.records().size(); ++k) {
    auto x = la.records()[k], y = lb.records()[k];
    x.erase("timestamp");
    y.erase("timestamp");
    CHECK(x == y);
  }
  const auto& r = ra.at(Instrument::bass);
  CHECK(r.best_val_loss() < r.initial_val_loss);
  CHECK(r.counters.at("s4") > 0);
}
