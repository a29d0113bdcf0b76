#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "fixtures.hpp"
#include "inmsrl/eval.hpp"

using namespace inmsrl;
using namespace inmsrl::eval;

namespace {

EmbeddingRow row(const std::string& piece, int seg, std::vector<double> v, const std::string& label = "") {
  return {piece, seg, Instrument::drums, label, "", std::move(v)};
}

// Full sort, explicit vote count, explicit tie rules.
std::string reference_knn(const std::vector<EmbeddingRow>& rows, std::size_t q) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (j == q) continue;
    double s = 0;
    for (std::size_t k = 0; k < rows[q].vector.size(); ++k)
      s += (rows[q].vector[k] - rows[j].vector[k]) * (rows[q].vector[k] - rows[j].vector[k]);
    d.push_back({std::sqrt(s), j});
  }
  std::sort(d.begin(), d.end());
  std::map<std::string, int> count;
  std::map<std::string, double> total;
  for (int k = 0; k < 5; ++k) {
    const std::string& l = rows[d[k].second].piece_id;
    ++count[l];
    total[l] += d[k].first;
  }
  std::string best;
  for (const auto& [l, c] : count)
    if (best.empty() || c > count[best] || (c == count[best] && total[l] < total[best])) best = l;
  return best;
}

ABXRecord rec(const std::string& id, int va, int vb, ABXCondition c = ABXCondition::all_diff,
              Instrument i = Instrument::drums) {
  return {id, i, c, {"x", 0, 5}, {"a", 0, 5}, {"b", 0, 5}, va, vb};
}

}  // namespace

TEST_CASE("knn5 on a line") {
  EmbeddingIndex idx;
  // Query at 0; neighbours p1 at 1,2 and p2 at 1.5,1.6,1.7; p3 far away.
  idx.add(row("q", 0, {0.0}));
  idx.add(row("p1", 0, {1.0}));
  idx.add(row("p1", 1, {2.0}));
  idx.add(row("p2", 0, {1.5}));
  idx.add(row("p2", 1, {1.6}));
  idx.add(row("p2", 2, {1.7}));
  idx.add(row("p3", 0, {9.0}));
  CHECK(knn5_predict(idx, 0, Instrument::drums) == "p2");

  SUBCASE("count tie resolved by summed distance") {
    EmbeddingIndex t;
    t.add(row("q", 0, {0.0}));
    t.add(row("b", 0, {1.0}));
    t.add(row("b", 1, {1.1}));
    t.add(row("a", 0, {2.0}));
    t.add(row("a", 1, {2.1}));
    t.add(row("c", 0, {3.0}));
    CHECK(knn5_predict(t, 0, Instrument::drums) == "b");
  }
  SUBCASE("exact tie resolved lexicographically") {
    EmbeddingIndex t;
    t.add(row("q", 0, {0.0}));
    t.add(row("b", 0, {1.0}));
    t.add(row("a", 0, {-1.0}));
    t.add(row("c", 0, {5.0}));
    t.add(row("d", 0, {6.0}));
    t.add(row("e", 0, {7.0}));
    CHECK(knn5_predict(t, 0, Instrument::drums) == "a");
  }
  SUBCASE("too few rows") {
    EmbeddingIndex t;
    for (int k = 0; k < 5; ++k) t.add(row("p" + std::to_string(k), 0, {double(k)}));
    CHECK_THROWS_AS(knn5_predict(t, 0, Instrument::drums), Error);
  }
  SUBCASE("same-piece exclusion") {
    CHECK(knn5_predict(idx, 1, Instrument::drums, Exclusion::same_piece) == "p2");
    CHECK_THROWS_AS(knn5_predict(idx, 3, Instrument::drums, Exclusion::same_piece), Error);
  }
}

TEST_CASE("index validation") {
  EmbeddingIndex idx;
  idx.add(row("p", 0, {1, 2}));
  CHECK(idx.rows()[0].label == "p");
  CHECK_THROWS_AS(idx.add(row("p", 0, {3, 4})), Error);
  CHECK_THROWS_AS(idx.add(row("q", 0, {3})), Error);
}

TEST_CASE("MES-Normal matches a brute-force reference") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  std::vector<EmbeddingRow> rows;
  for (int p = 0; p < 8; ++p)
    for (int s = 0; s < 6; ++s) {
      std::vector<double> v(4);
      for (int k = 0; k < 4; ++k) v[k] = g(rng) + 0.8 * p * (k == p % 4);
      rows.push_back(row("p" + std::to_string(p), s, v));
    }
  EmbeddingIndex idx;
  for (const auto& r : rows) idx.add(r);
  int correct = 0;
  for (std::size_t q = 0; q < rows.size(); ++q) {
    const auto expect = reference_knn(rows, q);
    CHECK(knn5_predict(idx, q, Instrument::drums) == expect);
    correct += expect == rows[q].piece_id;
  }
  const auto s = mes_normal(idx, Instrument::drums);
  CHECK(s.n == 48);
  CHECK(s.correct == correct);
}

TEST_CASE("MES chance level and perfect separation") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  EmbeddingIndex noise, onehot;
  for (int p = 0; p < 40; ++p)
    for (int s = 0; s < 10; ++s) {
      std::vector<double> v(16), h(40, 0.0);
      for (auto& x : v) x = g(rng);
      h[p] = 1.0;
      noise.add(row("p" + std::to_string(p), s, v));
      onehot.add(row("p" + std::to_string(p), s, h));
    }
  // Chance is 1/40; a one-sided binomial bound at n=400 keeps this below 0.06.
  CHECK(mes_normal(noise, Instrument::drums).accuracy < 0.06);
  CHECK(mes_normal(onehot, Instrument::drums).accuracy == 1.0);
}

TEST_CASE("MES-Pseudo test set") {
  const auto sc = corpus::synth_corpus(40, 0.5, 3, 8000);
  const auto set = build_mes_pseudo_set(sc.corpus, Instrument::bass, 4);
  REQUIRE(set.pieces.size() == 40);
  std::map<std::string, int> per_target;
  std::set<std::string> nontargets, targets;
  for (int k = 0; k < 30; ++k) {
    const auto& p = set.pieces[k];
    CHECK(p.pseudo);
    CHECK(p.target_piece != p.nontarget_piece);
    ++per_target[p.target_piece];
    nontargets.insert(p.nontarget_piece);
  }
  for (int k = 30; k < 40; ++k) {
    CHECK_FALSE(set.pieces[k].pseudo);
    targets.insert(set.pieces[k].target_piece);
  }
  CHECK(per_target.size() == 10);
  for (const auto& [t, n] : per_target) {
    CHECK(n == 3);
    CHECK(targets.count(t) == 1);
  }
  CHECK(nontargets.size() == 30);
  for (const auto& t : targets) CHECK(nontargets.count(t) == 0);
  CHECK_THROWS_AS(build_mes_pseudo_set(sc.corpus.subset({sc.corpus.at(0).id, sc.corpus.at(1).id}),
                                       Instrument::bass, 4),
                  Error);

  // Same-piece exclusion leaves 2 pseudo + 1 normal correct pieces for a
  // pseudo query and 3 pseudo pieces for a normal query.
  EmbeddingIndex idx;
  for (const auto& p : set.pieces)
    for (int s = 0; s < 2; ++s) idx.add({p.id, s, Instrument::bass, p.target_piece, p.nontarget_piece, {0.0}});
  for (std::size_t q = 0; q < idx.size(); ++q) {
    const auto correct = eligible_correct_pieces(idx, q, Instrument::bass, Exclusion::same_piece);
    REQUIRE(correct.size() == 3);
    const int normals = static_cast<int>(std::count(correct.begin(), correct.end(), idx.rows()[q].label));
    const bool pseudo_query = idx.rows()[q].piece_id != idx.rows()[q].label;
    CHECK(normals == (pseudo_query ? 1 : 0));
  }
}

TEST_CASE("MES-Pseudo rendering pairs matching segment indices") {
  const auto sc = corpus::synth_corpus(40, 2.0, 5, 8000);
  const auto set = build_mes_pseudo_set(sc.corpus, Instrument::drums, 6);
  const auto segs = render_mes_pseudo(sc.corpus, set, 1.0);
  CHECK(segs.size() == 80);
  for (const auto& s : segs) {
    const auto& src = s.example.sources;
    CHECK(src[0].piece_id == s.label);
    CHECK(src[1].piece_id == s.shape_label);
    CHECK(src[0].start == src[1].start);
  }
}

TEST_CASE("visualization set") {
  const auto sc = corpus::synth_corpus(12, 3.0, 7, 8000);
  const auto v = build_visualization_set(sc.corpus, Instrument::guitar, 8, 1.0, 3, 2);
  CHECK(v.segments.size() == 3 * 3 * 2);
  std::map<std::string, int> per_pair;
  for (const auto& s : v.segments) ++per_pair[s.piece_id];
  CHECK(per_pair.size() == 9);
  for (const auto& [id, n] : per_pair) CHECK(n == 2);
  CHECK_THROWS_AS(build_visualization_set(sc.corpus, Instrument::guitar, 8, 1.0, 3, 4), Error);
}

TEST_CASE("Clopper-Pearson") {
  struct Case {
    int k, n;
    double lo, hi;
  };
  const Case cases[] = {{7, 10, 0.3475471499400027, 0.9332604888222655},
                        {0, 10, 0.0, 0.3084971078187608},
                        {10, 10, 0.6915028921812392, 1.0},
                        {50, 100, 0.39832112950330106, 0.6016788704966989},
                        {1, 3, 0.008403758659612636, 0.9057006759497539}};
  for (const auto& c : cases) {
    const auto ci = clopper_pearson(c.k, c.n);
    CHECK(ci.low == doctest::Approx(c.lo).epsilon(1e-9));
    CHECK(ci.high == doctest::Approx(c.hi).epsilon(1e-9));
  }
  CHECK_THROWS_AS(clopper_pearson(3, 2), Error);
}

TEST_CASE("ABX agreement") {
  CHECK(passes_consensus(rec("r", 8, 2), 0.75));
  CHECK_FALSE(passes_consensus(rec("r", 7, 3), 0.75));
  CHECK_FALSE(passes_consensus(rec("r", 3, 1), 0.75));

  const std::vector<ABXRecord> records = {rec("r1", 8, 2), rec("r2", 1, 9), rec("r3", 7, 3), rec("r4", 0, 5)};
  std::map<std::string, ABXEmbedding> emb;
  emb["r1"] = {{0.0}, {0.1}, {1.0}};  // predicts A
  emb["r2"] = {{0.0}, {1.0}, {0.1}};  // predicts B
  emb["r3"] = {{0.0}, {1.0}, {0.1}};
  emb["r4"] = {{0.0}, {0.1}, {1.0}};  // wrong
  const auto s = abx_agreement(records, emb, {});
  CHECK(s.n == 3);
  CHECK(s.correct == 2);
  CHECK(s.filtered_out == 1);

  AbxOptions pr;
  pr.per_response = true;
  const auto r = abx_agreement(records, emb, pr);
  CHECK(r.n == 25);
  CHECK(r.correct == 8 + 9 + 0);

  SUBCASE("ties predict A") { CHECK(predicts_a({{0.0}, {1.0}, {-1.0}}, Instrument::drums, false)); }
  SUBCASE("masking ignores other subspaces") {
    std::vector<double> x(10, 0.0), a(10, 0.0), b(10, 0.0);
    a[0] = 1.0;  // drums subspace is [0,2)
    b[5] = 0.1;
    CHECK_FALSE(predicts_a({x, a, b}, Instrument::drums, false));
    CHECK_FALSE(predicts_a({x, a, b}, Instrument::drums, true));
    CHECK(predicts_a({x, b, a}, Instrument::drums, true));
    CHECK(predicts_a({x, a, b}, Instrument::piano, true));
  }
  SUBCASE("nothing passes the filter") {
    CHECK_THROWS_AS(abx_agreement({rec("r3", 7, 3)}, emb, {}), Error);
  }
}

TEST_CASE("ABX agreement by construction, at random and under scaling") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  std::vector<ABXRecord> records;
  std::map<std::string, ABXEmbedding> good, noise, scaled;
  for (int k = 0; k < 400; ++k) {
    const std::string id = "r" + std::to_string(k);
    const bool a_wins = k % 2 == 0;
    records.push_back(rec(id, a_wins ? 9 : 1, a_wins ? 1 : 9));
    std::vector<double> x(3), near(3), far(3), u(3), v(3), w(3);
    for (int d = 0; d < 3; ++d) {
      x[d] = g(rng);
      near[d] = x[d] + 0.1 * g(rng);
      far[d] = x[d] + 3.0 + g(rng);
      u[d] = g(rng);
      v[d] = g(rng);
      w[d] = g(rng);
    }
    good[id] = a_wins ? ABXEmbedding{x, near, far} : ABXEmbedding{x, far, near};
    noise[id] = {u, v, w};
    auto sc = good[id];
    for (auto* vec : {&sc.x, &sc.a, &sc.b})
      for (auto& e : *vec) e *= 37.0;
    scaled[id] = sc;
  }
  CHECK(abx_agreement(records, good, {}).agreement == 1.0);
  CHECK(abx_agreement(records, scaled, {}).agreement == 1.0);
  const auto r = abx_agreement(records, noise, {});
  CHECK(r.ci.low < 0.5);
  CHECK(r.ci.high > 0.5);
}

TEST_CASE("ABX split") {
  std::vector<ABXRecord> records;
  for (int k = 0; k < 20; ++k) records.push_back(rec("a" + std::to_string(k), 8, 2));
  for (int k = 0; k < 10; ++k) records.push_back(rec("o" + std::to_string(k), 8, 2, ABXCondition::one_shared));
  const auto s = abx_split(records, 0.7, 1);
  CHECK(s.train.size() == 21);
  CHECK(s.test.size() == 9);
  int one_shared_train = 0;
  for (const auto& r : s.train) one_shared_train += r.condition == ABXCondition::one_shared;
  CHECK(one_shared_train == 7);
  std::set<std::string> ids;
  for (const auto* part : {&s.train, &s.test})
    for (const auto& r : *part) ids.insert(r.record_id);
  CHECK(ids.size() == 30);

  auto shuffled = records;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto t = abx_split(shuffled, 0.7, 1);
  REQUIRE(t.train.size() == s.train.size());
  for (std::size_t k = 0; k < t.train.size(); ++k) CHECK(t.train[k].record_id == s.train[k].record_id);
  CHECK_THROWS_AS(abx_split({records.begin(), records.begin() + 9}, 0.7, 1), Error);
}

TEST_CASE("embedding CSV") {
  const auto dir = fixtures::scratch("csv");
  std::vector<EmbeddingRow> rows = {{"p0+p1", 0, Instrument::bass, "p0", "p1", {0.1, -2.5, 3e-7}},
                                    {"p2", 3, Instrument::bass, "p2", "p2", {1.0, 2.0, 3.0}}};
  export_embeddings(rows, dir / "e.csv");
  std::ifstream is(dir / "e.csv");
  std::string header, first;
  std::getline(is, header);
  std::getline(is, first);
  CHECK(header == "piece_id,segment_index,instrument,color_label,shape_label,dim_0,dim_1,dim_2");
  CHECK(std::count(first.begin(), first.end(), ',') == 5 + 3 - 1);
  const auto back = import_embeddings(dir / "e.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].shape_label == "p1");
  CHECK(back[1].segment_index == 3);
  for (std::size_t k = 0; k < 3; ++k)
    CHECK(static_cast<float>(back[0].vector[k]) == static_cast<float>(rows[0].vector[k]));
  rows[0].piece_id = "a,b";
  CHECK_THROWS_AS(export_embeddings(rows, dir / "bad.csv"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("oracle ABX records") {
  const auto& c = fixtures::small_corpus();
  const corpus::SegmentTable table(c, 5.0);
  OracleOptions o;
  o.records = 40;
  const auto a = synth_abx_records(table, Instrument::drums, 3, o);
  const auto b = synth_abx_records(table, Instrument::drums, 3, o);
  REQUIRE(a.size() == 40);
  int one_shared = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK_NOTHROW(validate(a[k]));
    CHECK(a[k].total() == 10);
    CHECK(a[k].votes_a == b[k].votes_a);
    if (a[k].condition == ABXCondition::one_shared) {
      ++one_shared;
      CHECK((a[k].x.piece_id == a[k].a.piece_id || a[k].x.piece_id == a[k].b.piece_id));
      CHECK_FALSE(a[k].x == a[k].a);
      CHECK_FALSE(a[k].x == a[k].b);
    }
  }
  CHECK(one_shared > 0);
  CHECK(one_shared < 40);
}
