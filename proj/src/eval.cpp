#include "inmsrl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <boost/math/distributions/beta.hpp>

#include "inmsrl/nets.hpp"

namespace inmsrl::eval {

void EmbeddingIndex::add(EmbeddingRow row) {
  require(!row.piece_id.empty(), "EmbeddingIndex: empty piece id");
  require(!row.vector.empty(), "EmbeddingIndex: empty vector");
  if (row.label.empty()) row.label = row.piece_id;
  if (row.shape_label.empty()) row.shape_label = row.piece_id;
  auto [it, fresh] = dims_.emplace(row.instrument, row.vector.size());
  require(fresh || it->second == row.vector.size(), "EmbeddingIndex: dimension differs within an instrument");
  if (masked_) require(row.vector.size() % kNumInstruments == 0, "EmbeddingIndex: masked vectors need 5 subspaces");
  for (const auto& r : rows_)
    require(!(r.piece_id == row.piece_id && r.segment_index == row.segment_index && r.instrument == row.instrument),
            "EmbeddingIndex: duplicate row " + row.piece_id + "/" + std::to_string(row.segment_index));
  rows_.push_back(std::move(row));
}

std::vector<std::size_t> EmbeddingIndex::rows_of(Instrument i) const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < rows_.size(); ++k)
    if (rows_[k].instrument == i) out.push_back(k);
  return out;
}

double EmbeddingIndex::distance(const EmbeddingRow& a, const EmbeddingRow& b, Instrument i) const {
  require(a.vector.size() == b.vector.size(), "EmbeddingIndex: dimension mismatch");
  std::size_t lo = 0, hi = a.vector.size();
  if (masked_) {
    const auto [l, h] = nets::subspace(static_cast<int>(hi), i);
    lo = static_cast<std::size_t>(l);
    hi = static_cast<std::size_t>(h);
  }
  double s = 0.0;
  for (std::size_t k = lo; k < hi; ++k) s += (a.vector[k] - b.vector[k]) * (a.vector[k] - b.vector[k]);
  return std::sqrt(s);
}

namespace {

bool excluded(const EmbeddingRow& q, std::size_t qi, const EmbeddingRow& r, std::size_t ri, Exclusion rule) {
  if (ri == qi) return true;
  return rule == Exclusion::same_piece && r.piece_id == q.piece_id;
}

struct Neighbour {
  double distance;
  std::size_t row;
};

std::vector<Neighbour> eligible(const EmbeddingIndex& idx, std::size_t query, Instrument inst, Exclusion rule) {
  require(query < idx.size(), "knn: query row out of range");
  const EmbeddingRow& q = idx.rows()[query];
  require(q.instrument == inst, "knn: query row belongs to another instrument");
  std::vector<Neighbour> out;
  for (std::size_t k : idx.rows_of(inst)) {
    const auto& r = idx.rows()[k];
    if (excluded(q, query, r, k, rule)) continue;
    out.push_back({idx.distance(q, r, inst), k});
  }
  return out;
}

}  // namespace

std::string knn5_predict(const EmbeddingIndex& idx, std::size_t query, Instrument inst, Exclusion rule) {
  constexpr std::size_t k = 5;
  auto cand = eligible(idx, query, inst, rule);
  require(cand.size() >= k, "knn5_predict: fewer than 5 eligible rows");
  const auto& rows = idx.rows();
  std::partial_sort(cand.begin(), cand.begin() + k, cand.end(), [&](const Neighbour& a, const Neighbour& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.row < b.row;
  });
  std::map<std::string, std::pair<int, double>> votes;
  for (std::size_t j = 0; j < k; ++j) {
    auto& v = votes[rows[cand[j].row].label];
    ++v.first;
    v.second += cand[j].distance;
  }
  // std::map iterates labels in lexicographic order, so the first best wins
  // the final tie-break.
  auto best = votes.begin();
  for (auto it = votes.begin(); it != votes.end(); ++it) {
    if (it->second.first > best->second.first ||
        (it->second.first == best->second.first && it->second.second < best->second.second))
      best = it;
  }
  return best->first;
}

std::vector<std::string> eligible_correct_pieces(const EmbeddingIndex& idx, std::size_t query, Instrument inst,
                                                 Exclusion rule) {
  const auto& q = idx.rows().at(query);
  std::set<std::string> pieces;
  for (const auto& n : eligible(idx, query, inst, rule)) {
    const auto& r = idx.rows()[n.row];
    if (r.label == q.label) pieces.insert(r.piece_id);
  }
  return {pieces.begin(), pieces.end()};
}

namespace {

Score score(const EmbeddingIndex& idx, Instrument inst, Exclusion rule) {
  Score s;
  for (std::size_t k : idx.rows_of(inst)) {
    ++s.n;
    if (knn5_predict(idx, k, inst, rule) == idx.rows()[k].label) ++s.correct;
  }
  require(s.n > 0, "MES: no rows for " + std::string(to_string(inst)));
  s.accuracy = static_cast<double>(s.correct) / s.n;
  return s;
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

}  // namespace

Score mes_normal(const EmbeddingIndex& idx, Instrument inst) { return score(idx, inst, Exclusion::self); }

Score mes_pseudo(const EmbeddingIndex& idx, Instrument inst) { return score(idx, inst, Exclusion::same_piece); }

MesPseudoSet build_mes_pseudo_set(const corpus::Corpus& c, Instrument target, std::uint64_t seed) {
  constexpr std::size_t kTargets = 10, kPerTarget = 3;
  require(c.size() >= kTargets * (1 + kPerTarget), "build_mes_pseudo_set: corpus needs at least 40 pieces");
  std::vector<std::string> ids;
  for (const auto& p : c.pieces()) ids.push_back(p.id);
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::string> targets(ids.begin(), ids.begin() + kTargets);
  std::vector<std::string> rest(ids.begin() + kTargets, ids.end());
  std::shuffle(rest.begin(), rest.end(), rng);
  std::sort(targets.begin(), targets.end());

  MesPseudoSet out;
  out.target = target;
  for (std::size_t t = 0; t < kTargets; ++t)
    for (std::size_t j = 0; j < kPerTarget; ++j) {
      const std::string& o = rest[t * kPerTarget + j];
      out.pieces.push_back({targets[t] + "+" + o, targets[t], o, true});
    }
  for (const auto& t : targets) out.pieces.push_back({t, t, t, false});
  return out;
}

namespace {

std::array<corpus::SegmentRef, kNumInstruments> sources_for(Instrument target, const corpus::SegmentRef& ts,
                                                            const corpus::SegmentRef& os) {
  std::array<corpus::SegmentRef, kNumInstruments> src;
  for (Instrument i : kAllInstruments) src[index_of(i)] = i == target ? ts : os;
  return src;
}

}  // namespace

std::vector<TestSegment> render_mes_normal(const corpus::Corpus& c, double duration_s) {
  std::vector<TestSegment> out;
  for (const auto& p : c.pieces()) {
    const auto segs = corpus::slice_segments(p, duration_s, duration_s);
    for (std::size_t k = 0; k < segs.size(); ++k) {
      corpus::Example e{corpus::extract_segment(c, segs[k]), {}};
      e.sources.fill(segs[k]);
      out.push_back({p.id, static_cast<int>(k), p.id, p.id, std::move(e)});
    }
  }
  return out;
}

std::vector<TestSegment> render_mes_pseudo(const corpus::Corpus& c, const MesPseudoSet& set, double duration_s) {
  std::vector<TestSegment> out;
  for (const auto& tp : set.pieces) {
    const auto ts = corpus::slice_segments(c.find(tp.target_piece), duration_s, duration_s);
    const auto os = corpus::slice_segments(c.find(tp.nontarget_piece), duration_s, duration_s);
    const std::size_t n = std::min(ts.size(), os.size());
    for (std::size_t k = 0; k < n; ++k)
      out.push_back({tp.id, static_cast<int>(k), tp.target_piece, tp.nontarget_piece,
                     corpus::render_example(c, sources_for(set.target, ts[k], os[k]))});
  }
  return out;
}

VisualizationSet build_visualization_set(const corpus::Corpus& c, Instrument target, std::uint64_t seed,
                                         double duration_s, int n_pieces, int n_segments) {
  require(n_pieces >= 1 && n_segments >= 1, "build_visualization_set: counts must be positive");
  require(c.size() >= static_cast<std::size_t>(n_pieces), "build_visualization_set: corpus too small");
  Rng rng(seed);
  std::vector<std::string> ids;
  for (const auto& p : c.pieces()) ids.push_back(p.id);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(static_cast<std::size_t>(n_pieces));
  std::sort(ids.begin(), ids.end());

  std::map<std::string, std::vector<corpus::SegmentRef>> retrieved;
  for (const auto& id : ids) {
    auto segs = corpus::slice_segments(c.find(id), duration_s, duration_s);
    require(segs.size() >= static_cast<std::size_t>(n_segments),
            "build_visualization_set: piece " + id + " has too few segments");
    std::shuffle(segs.begin(), segs.end(), rng);
    segs.resize(static_cast<std::size_t>(n_segments));
    retrieved[id] = std::move(segs);
  }

  VisualizationSet out;
  out.target = target;
  for (const auto& t : ids)
    for (const auto& o : ids)
      for (int k = 0; k < n_segments; ++k) {
        const auto& ts = pick(retrieved[t], rng);
        const auto& os = pick(retrieved[o], rng);
        out.segments.push_back({t + "+" + o, k, t, o, corpus::render_example(c, sources_for(target, ts, os))});
      }
  return out;
}

Interval clopper_pearson(int successes, int trials, double alpha) {
  require(trials >= 1 && successes >= 0 && successes <= trials, "clopper_pearson: invalid counts");
  require(alpha > 0.0 && alpha < 1.0, "clopper_pearson: alpha must be in (0,1)");
  namespace bm = boost::math;
  Interval ci;
  ci.low = successes == 0 ? 0.0
                          : bm::quantile(bm::beta_distribution<>(successes, trials - successes + 1), alpha / 2);
  ci.high = successes == trials
                ? 1.0
                : bm::quantile(bm::beta_distribution<>(successes + 1, trials - successes), 1 - alpha / 2);
  return ci;
}

bool passes_consensus(const ABXRecord& r, double min_consensus) { return r.consensus() > min_consensus; }

bool predicts_a(const ABXEmbedding& e, Instrument inst, bool subspace_masked) {
  require(e.x.size() == e.a.size() && e.x.size() == e.b.size() && !e.x.empty(),
          "abx: embedding dimension mismatch");
  std::size_t lo = 0, hi = e.x.size();
  if (subspace_masked) {
    const auto [l, h] = nets::subspace(static_cast<int>(hi), inst);
    lo = static_cast<std::size_t>(l);
    hi = static_cast<std::size_t>(h);
  }
  double da = 0.0, db = 0.0;
  for (std::size_t k = lo; k < hi; ++k) {
    da += (e.x[k] - e.a[k]) * (e.x[k] - e.a[k]);
    db += (e.x[k] - e.b[k]) * (e.x[k] - e.b[k]);
  }
  return da <= db;
}

AbxScore abx_agreement(const std::vector<ABXRecord>& records, const std::map<std::string, ABXEmbedding>& embeddings,
                       const AbxOptions& opts) {
  AbxScore s;
  for (const auto& r : records) {
    if (opts.condition && r.condition != *opts.condition) continue;
    if (opts.instrument && r.instrument != *opts.instrument) continue;
    if (!passes_consensus(r, opts.min_consensus)) {
      ++s.filtered_out;
      continue;
    }
    auto it = embeddings.find(r.record_id);
    require(it != embeddings.end(), "abx_agreement: no embeddings for record " + r.record_id);
    const bool a = predicts_a(it->second, r.instrument, opts.subspace_masked);
    if (opts.per_response) {
      s.n += r.total();
      s.correct += a ? r.votes_a : r.votes_b;
    } else {
      ++s.n;
      if (a == r.majority_a()) ++s.correct;
    }
  }
  require(s.n > 0, "abx_agreement: no records pass the consensus filter");
  s.agreement = static_cast<double>(s.correct) / s.n;
  s.ci = clopper_pearson(s.correct, s.n);
  return s;
}

AbxSplit abx_split(const std::vector<ABXRecord>& records, double train_ratio, std::uint64_t seed) {
  require(!records.empty(), "abx_split: no records");
  require(records.size() >= 10, "abx_split: need at least 10 records");
  require(train_ratio > 0.0 && train_ratio < 1.0, "abx_split: ratio must be in (0,1)");
  std::map<std::pair<Instrument, ABXCondition>, std::vector<const ABXRecord*>> strata;
  for (const auto& r : records) strata[{r.instrument, r.condition}].push_back(&r);
  Rng rng(seed);
  AbxSplit out;
  for (auto& [key, group] : strata) {
    std::sort(group.begin(), group.end(),
              [](const ABXRecord* a, const ABXRecord* b) { return a->record_id < b->record_id; });
    std::shuffle(group.begin(), group.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(train_ratio * static_cast<double>(group.size())));
    for (std::size_t k = 0; k < group.size(); ++k) (k < n_train ? out.train : out.test).push_back(*group[k]);
  }
  return out;
}

namespace {

void check_field(const std::string& s, const char* what) {
  require(s.find_first_of(",\"\n\r") == std::string::npos,
          std::string("export_embeddings: ") + what + " contains a CSV delimiter");
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void export_embeddings(const std::vector<EmbeddingRow>& rows, const std::filesystem::path& path) {
  require(!rows.empty(), "export_embeddings: no rows");
  const std::size_t dim = rows.front().vector.size();
  for (const auto& r : rows) {
    require(r.vector.size() == dim, "export_embeddings: rows differ in dimension");
    check_field(r.piece_id, "piece_id");
    check_field(r.label, "color_label");
    check_field(r.shape_label, "shape_label");
  }
  std::ofstream os(path);
  require(static_cast<bool>(os), "export_embeddings: cannot write " + path.string());
  os << "piece_id,segment_index,instrument,color_label,shape_label";
  for (std::size_t k = 0; k < dim; ++k) os << ",dim_" << k;
  os << '\n';
  char buf[32];
  for (const auto& r : rows) {
    os << r.piece_id << ',' << r.segment_index << ',' << to_string(r.instrument) << ','
       << (r.label.empty() ? r.piece_id : r.label) << ',' << (r.shape_label.empty() ? r.piece_id : r.shape_label);
    for (double v : r.vector) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(static_cast<float>(v)));
      os << ',' << buf;
    }
    os << '\n';
  }
  require(static_cast<bool>(os), "export_embeddings: write failed for " + path.string());
}

std::vector<EmbeddingRow> import_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "import_embeddings: cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "import_embeddings: missing header");
  const auto header = split_csv(line);
  require(header.size() >= 6 && header[0] == "piece_id", "import_embeddings: bad header");
  const std::size_t dim = header.size() - 5;
  std::vector<EmbeddingRow> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    require(cells.size() == dim + 5, "import_embeddings: wrong column count on line " + std::to_string(lineno));
    EmbeddingRow r;
    r.piece_id = cells[0];
    r.segment_index = std::stoi(cells[1]);
    r.instrument = instrument_from_string(cells[2]);
    r.label = cells[3];
    r.shape_label = cells[4];
    for (std::size_t k = 0; k < dim; ++k) r.vector.push_back(std::stod(cells[5 + k]));
    out.push_back(std::move(r));
  }
  return out;
}

nlohmann::json metric_report(const std::string& metric, Instrument inst, const std::string& condition,
                             double value, Interval ci, int n) {
  return {{"metric", metric}, {"instrument", std::string(to_string(inst))},
          {"condition", condition}, {"value", value},
          {"ci_low", ci.low}, {"ci_high", ci.high},
          {"n", n}, {"averaging", "micro"}};
}

std::vector<double> oracle_features(const dsp::Waveform& stem) {
  const int window = 256;
  require(stem.samples.size() >= static_cast<std::size_t>(window), "oracle_features: stem too short");
  const auto mag = dsp::magnitude(dsp::stft(stem, window, window / 2));
  const double bin_hz = static_cast<double>(stem.sample_rate) / window;
  const int split = std::min(mag.bins - 1, static_cast<int>(std::lround(1000.0 / bin_hz)));
  double weight = 0.0, centroid = 0.0, high = 0.0, total = 0.0;
  for (int t = 0; t < mag.frames; ++t) {
    double e = 0.0, c = 0.0;
    for (int k = 0; k < mag.bins; ++k) {
      const double p = mag.at(t, k) * mag.at(t, k);
      e += p;
      c += p * k * bin_hz;
      if (k >= split) high += p;
    }
    total += e;
    if (e > 0.0) {
      centroid += c;
      weight += e;
    }
  }
  require(weight > 0.0, "oracle_features: silent stem");
  return {std::log(centroid / weight), high / total};
}

namespace {

double oracle_distance(const std::vector<double>& a, const std::vector<double>& b) {
  const double d0 = a[0] - b[0];
  const double d1 = 4.0 * (a[1] - b[1]);
  return std::sqrt(d0 * d0 + d1 * d1);
}

}  // namespace

std::vector<ABXRecord> synth_abx_records(const corpus::SegmentTable& table, Instrument inst, std::uint64_t seed,
                                         const OracleOptions& opts) {
  require(opts.records >= 1 && opts.voters >= 1, "synth_abx_records: counts must be positive");
  const corpus::Corpus& c = table.corpus();
  const auto pieces = table.eligible_pieces(inst, 2);
  require(pieces.size() >= 3, "synth_abx_records: need 3 pieces with audible segments");
  Rng rng(seed);
  std::map<std::pair<std::size_t, int>, std::vector<double>> cache;
  const auto features = [&](std::size_t p, int s) -> const std::vector<double>& {
    auto it = cache.find({p, s});
    if (it == cache.end())
      it = cache.emplace(std::make_pair(p, s),
                         oracle_features(corpus::extract_stem(c, table.segments(p)[static_cast<std::size_t>(s)], inst)))
               .first;
    return it->second;
  };
  const auto audible_seg = [&](std::size_t p, int avoid) {
    const auto& aud = table.audible(p, inst);
    int s;
    do s = pick(aud, rng);
    while (s == avoid && aud.size() > 1);
    return s;
  };

  std::bernoulli_distribution shared(opts.one_shared_fraction);
  std::vector<ABXRecord> out;
  char id[32];
  for (int n = 0; n < opts.records; ++n) {
    ABXRecord r;
    std::snprintf(id, sizeof id, "abx_%05d", n);
    r.record_id = id;
    r.instrument = inst;
    std::vector<std::size_t> pool = pieces;
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t px = pool[0];
    const int sx = audible_seg(px, -1);
    std::size_t pa = pool[1], pb = pool[2];
    int sa, sb;
    if (shared(rng)) {
      r.condition = ABXCondition::one_shared;
      if (std::bernoulli_distribution(0.5)(rng)) pa = px;
      else pb = px;
    } else {
      r.condition = ABXCondition::all_diff;
    }
    sa = audible_seg(pa, pa == px ? sx : -1);
    sb = audible_seg(pb, pb == px ? sx : -1);
    const auto seg = [&](std::size_t p, int s) { return table.segments(p)[static_cast<std::size_t>(s)]; };
    r.x = seg(px, sx);
    r.a = seg(pa, sa);
    r.b = seg(pb, sb);
    const double da = oracle_distance(features(px, sx), features(pa, sa));
    const double db = oracle_distance(features(px, sx), features(pb, sb));
    const double p_a = 1.0 / (1.0 + std::exp(-opts.sharpness * (db - da) / (da + db + 1e-12)));
    r.votes_a = std::binomial_distribution<int>(opts.voters, p_a)(rng);
    r.votes_b = opts.voters - r.votes_a;
    validate(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace inmsrl::eval
