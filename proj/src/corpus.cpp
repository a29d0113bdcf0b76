#include "inmsrl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "inmsrl/abx.hpp"

namespace inmsrl::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Manifest

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "load_manifest: cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("load_manifest: " + path.string() + " is not valid JSON: " + e.what());
  }
  require(doc.is_object() && doc.contains("pieces") && doc["pieces"].is_array(),
          "load_manifest: " + path.string() + " has no \"pieces\" array");

  const fs::path base = path.parent_path();
  Manifest m;
  std::set<std::string> seen;
  for (const auto& p : doc["pieces"]) {
    require(p.contains("id") && p["id"].is_string(), "load_manifest: piece without string \"id\"");
    PieceManifest pm;
    pm.piece_id = p["id"].get<std::string>();
    require(seen.insert(pm.piece_id).second, "load_manifest: duplicate piece_id '" + pm.piece_id + "'");
    require(p.contains("stems") && p["stems"].is_object(),
            "load_manifest: piece '" + pm.piece_id + "' has no \"stems\" object");
    for (Instrument i : kAllInstruments) {
      const std::string name(to_string(i));
      const auto& stems = p["stems"];
      require(stems.contains(name) && stems[name].is_string() && !stems[name].get<std::string>().empty(),
              "load_manifest: piece '" + pm.piece_id + "' is missing stem '" + name + "'");
      fs::path sp = stems[name].get<std::string>();
      if (sp.is_relative()) sp = base / sp;
      require(fs::exists(sp), "load_manifest: piece '" + pm.piece_id + "' stem '" + name +
                                  "' not found at " + sp.string());
      pm.stem_paths[index_of(i)] = sp;
    }
    m.pieces.push_back(std::move(pm));
  }
  require(!m.pieces.empty(), "load_manifest: " + path.string() + " lists zero pieces");
  std::sort(m.pieces.begin(), m.pieces.end(),
            [](const PieceManifest& a, const PieceManifest& b) { return a.piece_id < b.piece_id; });
  return m;
}

void write_manifest(const fs::path& path, const Manifest& m) {
  const fs::path base = path.parent_path();
  json doc;
  doc["pieces"] = json::array();
  for (const auto& p : m.pieces) {
    json stems;
    for (Instrument i : kAllInstruments) {
      const fs::path& sp = p.stem_paths[index_of(i)];
      stems[std::string(to_string(i))] = sp.lexically_relative(base).generic_string();
    }
    doc["pieces"].push_back({{"id", p.piece_id}, {"stems", stems}});
  }
  std::ofstream os(path);
  require(static_cast<bool>(os), "write_manifest: cannot write " + path.string());
  os << doc.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// StemSet / Corpus

dsp::Waveform StemSet::scaled_stem(Instrument i) const {
  dsp::Waveform w = stem(i);
  if (gain != 1.0)
    for (float& v : w.samples) v = static_cast<float>(gain * v);
  return w;
}

StemSet make_stem_set(std::array<dsp::Waveform, kNumInstruments> stems) {
  const std::size_t n = stems[0].samples.size();
  const int sr = stems[0].sample_rate;
  for (Instrument i : kAllInstruments) {
    const auto& s = stems[index_of(i)];
    require(s.samples.size() == n, "make_stem_set: stem '" + std::string(to_string(i)) +
                                       "' has length " + std::to_string(s.samples.size()) +
                                       ", expected " + std::to_string(n));
    require(s.sample_rate == sr, "make_stem_set: sample rate mismatch on '" +
                                     std::string(to_string(i)) + "'");
  }
  StemSet out;
  std::vector<double> sum(n, 0.0);
  for (const auto& s : stems)
    for (std::size_t k = 0; k < n; ++k) sum[k] += s.samples[k];
  double peak = 0.0;
  for (double v : sum) peak = std::max(peak, std::abs(v));
  out.gain = peak > 1.0 ? 1.0 / peak : 1.0;
  out.mix.sample_rate = sr;
  out.mix.samples.resize(n);
  for (std::size_t k = 0; k < n; ++k) out.mix.samples[k] = static_cast<float>(out.gain * sum[k]);
  out.stems = std::move(stems);
  return out;
}

Corpus::Corpus(std::vector<Piece> pieces) : pieces_(std::move(pieces)) {
  std::sort(pieces_.begin(), pieces_.end(), [](const Piece& a, const Piece& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < pieces_.size(); ++i)
    require(pieces_[i].id != pieces_[i - 1].id, "Corpus: duplicate piece_id '" + pieces_[i].id + "'");
  for (const auto& p : pieces_)
    require(p.audio.sample_rate() == pieces_.front().audio.sample_rate(),
            "Corpus: mixed sample rates ('" + p.id + "')");
}

const Piece& Corpus::find(const std::string& id) const { return pieces_[index_of_piece(id)]; }

std::size_t Corpus::index_of_piece(const std::string& id) const {
  auto it = std::lower_bound(pieces_.begin(), pieces_.end(), id,
                             [](const Piece& p, const std::string& v) { return p.id < v; });
  require(it != pieces_.end() && it->id == id, "Corpus: unknown piece_id '" + id + "'");
  return static_cast<std::size_t>(it - pieces_.begin());
}

int Corpus::sample_rate() const {
  require(!pieces_.empty(), "Corpus: empty");
  return pieces_.front().audio.sample_rate();
}

Corpus Corpus::subset(const std::vector<std::string>& ids) const {
  std::vector<Piece> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(find(id));
  return Corpus(std::move(out));
}

Corpus load_corpus(const Manifest& m) {
  std::vector<Piece> pieces;
  for (const auto& pm : m.pieces) {
    std::array<dsp::Waveform, kNumInstruments> stems;
    for (Instrument i : kAllInstruments) stems[index_of(i)] = dsp::read_wav(pm.stem_paths[index_of(i)]);
    pieces.push_back({pm.piece_id, make_stem_set(std::move(stems))});
  }
  return Corpus(std::move(pieces));
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double semitones(double f, int st) { return f * std::pow(2.0, st / 12.0); }

// Band-limited harmonic note with attack and exponential decay.
void add_note(std::vector<double>& buf, int sr, std::size_t start, std::size_t len, double f0,
              double rolloff, double decay_s, double amp, double harmonic_damping = 0.0) {
  const double nyquist_guard = 0.45 * sr;
  const std::size_t attack = static_cast<std::size_t>(0.01 * sr);
  for (int h = 1; h <= 8 && h * f0 < nyquist_guard; ++h) {
    const double a = amp / std::pow(h, rolloff);
    const double w = kTwoPi * h * f0 / sr;
    const double tau = decay_s / (1.0 + harmonic_damping * (h - 1));
    for (std::size_t k = 0; k < len && start + k < buf.size(); ++k) {
      const double t = static_cast<double>(k) / sr;
      double env = std::exp(-t / tau);
      if (k < attack) env *= static_cast<double>(k) / attack;
      buf[start + k] += a * env * std::sin(w * k);
    }
  }
}

void scale_to_peak(std::vector<double>& buf, double peak) {
  double m = 0.0;
  for (double v : buf) m = std::max(m, std::abs(v));
  if (m > 0.0)
    for (double& v : buf) v *= peak / m;
}

dsp::Waveform to_waveform(const std::vector<double>& buf, int sr) {
  dsp::Waveform w;
  w.sample_rate = sr;
  w.samples.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) w.samples[i] = static_cast<float>(buf[i]);
  return w;
}

std::vector<double> render_drums(const SynthPieceParams& p, std::size_t n, int sr, Rng& rng) {
  std::vector<double> buf(n, 0.0);
  const std::size_t ioi = static_cast<std::size_t>(std::llround(p.drum_ioi_s * sr));
  const std::size_t event_len = static_cast<std::size_t>(5.0 * p.drum_decay_s * sr);
  const double accents[4] = {1.0, 0.45, 0.8, 0.45};
  // One-pole lowpass coefficient for the noise component.
  const double alpha = 1.0 - std::exp(-kTwoPi * p.drum_noise_cutoff_hz / sr);
  std::normal_distribution<double> noise(0.0, 1.0);
  int beat = 0;
  for (std::size_t onset = 0; onset < n; onset += ioi, ++beat) {
    const double acc = accents[beat % 4];
    double lp = 0.0;
    for (std::size_t k = 0; k < event_len && onset + k < n; ++k) {
      const double t = static_cast<double>(k) / sr;
      const double tone = std::sin(kTwoPi * p.drum_resonance_hz * t) * std::exp(-t / p.drum_decay_s);
      lp += alpha * (noise(rng) - lp);
      const double hiss = lp * std::exp(-t / (0.5 * p.drum_decay_s));
      buf[onset + k] += acc * (tone + 0.6 * hiss);
    }
  }
  scale_to_peak(buf, 0.3);
  return buf;
}

std::vector<double> render_sequence(std::size_t n, int sr, double f0, double note_s,
                                    const std::array<int, 4>& pattern, double rolloff,
                                    double decay_s, double damping, double peak) {
  std::vector<double> buf(n, 0.0);
  const std::size_t step = static_cast<std::size_t>(std::llround(note_s * sr));
  int k = 0;
  for (std::size_t start = 0; start < n; start += step, ++k)
    add_note(buf, sr, start, step, semitones(f0, pattern[k % 4]), rolloff, decay_s, 1.0, damping);
  scale_to_peak(buf, peak);
  return buf;
}

std::vector<double> render_piano(const SynthPieceParams& p, std::size_t n, int sr) {
  std::vector<double> buf(n, 0.0);
  const std::size_t step = static_cast<std::size_t>(std::llround(p.piano_note_s * sr));
  int k = 0;
  for (std::size_t start = 0; start < n; start += step, ++k) {
    const double root = semitones(p.piano_f0_hz, p.melody_pattern[k % 4]);
    for (int interval : {0, 4, 7})
      add_note(buf, sr, start, step, semitones(root, interval), 1.5, 0.4, 1.0);
  }
  scale_to_peak(buf, 0.15);
  return buf;
}

std::vector<double> render_residuals(const SynthPieceParams& p, std::size_t n, int sr, Rng& rng) {
  std::vector<double> buf(n, 0.0);
  const double trem = 0.5 + 3.0 * (p.residual_f0_hz - 110.0) / 220.0;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int h = 1; h <= 6 && h * p.residual_f0_hz < 0.45 * sr; ++h) {
    const double w = kTwoPi * h * p.residual_f0_hz / sr;
    for (std::size_t k = 0; k < n; ++k) {
      const double t = static_cast<double>(k) / sr;
      buf[k] += (1.0 / h) * (0.6 + 0.4 * std::sin(kTwoPi * trem * t)) * std::sin(w * k);
    }
  }
  for (std::size_t k = 0; k < n; ++k) buf[k] += 0.05 * noise(rng);
  scale_to_peak(buf, 0.1);
  return buf;
}

std::array<int, 4> draw_pattern(Rng& rng) {
  static constexpr int kSteps[] = {0, 2, 3, 5, 7, 8, 10, 12};
  std::array<int, 4> out{};
  out[0] = 0;
  for (int i = 1; i < 4; ++i)
    out[i] = kSteps[std::uniform_int_distribution<int>(0, 7)(rng)];
  return out;
}

}  // namespace

json to_json(const SynthPieceParams& p) {
  return {{"id", p.id},
          {"drum_bpm", p.drum_bpm},
          {"drum_ioi_s", p.drum_ioi_s},
          {"drum_resonance_hz", p.drum_resonance_hz},
          {"drum_decay_s", p.drum_decay_s},
          {"drum_noise_cutoff_hz", p.drum_noise_cutoff_hz},
          {"bass_f0_hz", p.bass_f0_hz},
          {"bass_note_s", p.bass_note_s},
          {"bass_pattern", p.bass_pattern},
          {"piano_f0_hz", p.piano_f0_hz},
          {"piano_note_s", p.piano_note_s},
          {"melody_pattern", p.melody_pattern},
          {"guitar_f0_hz", p.guitar_f0_hz},
          {"guitar_note_s", p.guitar_note_s},
          {"residual_f0_hz", p.residual_f0_hz}};
}

SynthCorpus synth_corpus(int n_pieces, double duration_s, std::uint64_t seed, int sample_rate) {
  require(n_pieces >= 2, "synth_corpus: need at least 2 pieces, got " + std::to_string(n_pieces));
  require(duration_s > 0.0, "synth_corpus: duration must be positive");
  require(sample_rate > 0, "synth_corpus: sample rate must be positive");
  const auto n = static_cast<std::size_t>(std::llround(duration_s * sample_rate));

  // Tempo cells are a permutation so every piece gets a distinct drum period.
  Rng master(seed);
  std::vector<int> tempo_cell(n_pieces);
  for (int i = 0; i < n_pieces; ++i) tempo_cell[i] = i;
  std::shuffle(tempo_cell.begin(), tempo_cell.end(), master);

  SynthCorpus out;
  std::vector<Piece> pieces;
  for (int k = 0; k < n_pieces; ++k) {
    std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(k)};
    Rng rng(ss);
    SynthPieceParams p;
    char id[32];
    std::snprintf(id, sizeof id, "piece_%03d", k);
    p.id = id;
    p.drum_bpm = 70.0 + 110.0 * (tempo_cell[k] + uniform(rng, 0.2, 0.8)) / n_pieces;
    p.drum_ioi_s = 60.0 / p.drum_bpm;
    p.drum_resonance_hz = uniform(rng, 60.0, 400.0);
    p.drum_decay_s = uniform(rng, 0.03, 0.15);
    p.drum_noise_cutoff_hz = uniform(rng, 300.0, 0.4 * sample_rate);
    p.bass_f0_hz = uniform(rng, 40.0, 110.0);
    p.bass_note_s = uniform(rng, 0.25, 0.8);
    p.bass_pattern = draw_pattern(rng);
    p.piano_f0_hz = uniform(rng, 196.0, 523.0);
    p.piano_note_s = uniform(rng, 0.5, 1.5);
    p.melody_pattern = draw_pattern(rng);
    p.guitar_f0_hz = uniform(rng, 147.0, 440.0);
    p.guitar_note_s = uniform(rng, 0.2, 0.6);
    p.residual_f0_hz = uniform(rng, 110.0, 330.0);

    std::array<dsp::Waveform, kNumInstruments> stems;
    stems[index_of(Instrument::drums)] = to_waveform(render_drums(p, n, sample_rate, rng), sample_rate);
    stems[index_of(Instrument::bass)] = to_waveform(
        render_sequence(n, sample_rate, p.bass_f0_hz, p.bass_note_s, p.bass_pattern, 1.0,
                        p.bass_note_s, 0.0, 0.2),
        sample_rate);
    stems[index_of(Instrument::piano)] = to_waveform(render_piano(p, n, sample_rate), sample_rate);
    stems[index_of(Instrument::guitar)] = to_waveform(
        render_sequence(n, sample_rate, p.guitar_f0_hz, p.guitar_note_s, p.melody_pattern, 0.8,
                        0.25, 0.6, 0.15),
        sample_rate);
    stems[index_of(Instrument::residuals)] =
        to_waveform(render_residuals(p, n, sample_rate, rng), sample_rate);

    pieces.push_back({p.id, make_stem_set(std::move(stems))});
    out.params.push_back(std::move(p));
  }
  out.corpus = Corpus(std::move(pieces));
  return out;
}

void write_synth_corpus(const SynthCorpus& sc, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  Manifest m;
  for (const auto& piece : sc.corpus.pieces()) {
    PieceManifest pm;
    pm.piece_id = piece.id;
    const fs::path dir = out_dir / piece.id;
    fs::create_directories(dir);
    for (Instrument i : kAllInstruments) {
      const fs::path p = dir / (std::string(to_string(i)) + ".wav");
      dsp::write_wav(p, piece.audio.stem(i));
      pm.stem_paths[index_of(i)] = p;
    }
    m.pieces.push_back(std::move(pm));
  }
  write_manifest(out_dir / "manifest.json", m);

  json params = json::array();
  for (const auto& p : sc.params) params.push_back(to_json(p));
  std::ofstream os(out_dir / "params.json");
  require(static_cast<bool>(os), "write_synth_corpus: cannot write params.json");
  os << json{{"pieces", params}}.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Segments

json to_json(const SegmentRef& s) {
  return {{"piece_id", s.piece_id}, {"start", s.start}, {"duration", s.duration}};
}

SegmentRef segment_from_json(const json& j) {
  SegmentRef s;
  s.piece_id = j.at("piece_id").get<std::string>();
  s.start = j.at("start").get<double>();
  s.duration = j.at("duration").get<double>();
  require(s.start >= 0.0 && s.duration > 0.0, "segment: invalid start/duration for '" + s.piece_id + "'");
  return s;
}

std::vector<SegmentRef> slice_segments(const Piece& piece, double duration_s, double hop_s) {
  require(duration_s > 0.0 && hop_s > 0.0, "slice_segments: duration and hop must be positive");
  const int sr = piece.audio.sample_rate();
  const auto len = static_cast<long long>(piece.audio.length());
  const long long d = std::llround(duration_s * sr);
  const long long h = std::llround(hop_s * sr);
  require(d <= len, "slice_segments: segment of " + std::to_string(duration_s) +
                        " s is longer than piece '" + piece.id + "'");
  std::vector<SegmentRef> out;
  for (long long start = 0; start + d <= len; start += h)
    out.push_back({piece.id, static_cast<double>(start) / sr, duration_s});
  return out;
}

std::pair<std::size_t, std::size_t> sample_range(const SegmentRef& s, int sample_rate) {
  const auto start = static_cast<std::size_t>(std::llround(s.start * sample_rate));
  const auto len = static_cast<std::size_t>(std::llround(s.duration * sample_rate));
  return {start, len};
}

namespace {

dsp::Waveform slice(const dsp::Waveform& w, std::size_t start, std::size_t len, const SegmentRef& s) {
  require(start + len <= w.samples.size(),
          "segment " + s.piece_id + "@" + std::to_string(s.start) + "s exceeds the piece length");
  dsp::Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(start),
                     w.samples.begin() + static_cast<std::ptrdiff_t>(start + len));
  return out;
}

}  // namespace

dsp::Waveform extract_stem(const Corpus& c, const SegmentRef& s, Instrument i) {
  const Piece& p = c.find(s.piece_id);
  auto [start, len] = sample_range(s, p.audio.sample_rate());
  return slice(p.audio.stem(i), start, len, s);
}

StemSet extract_segment(const Corpus& c, const SegmentRef& s) {
  const Piece& p = c.find(s.piece_id);
  auto [start, len] = sample_range(s, p.audio.sample_rate());
  std::array<dsp::Waveform, kNumInstruments> stems;
  for (Instrument i : kAllInstruments) stems[index_of(i)] = slice(p.audio.stem(i), start, len, s);
  return make_stem_set(std::move(stems));
}

bool is_silent(std::span<const float> segment, double threshold_dbfs) {
  return dsp::rms_dbfs(segment) < threshold_dbfs;
}

SegmentTable::SegmentTable(const Corpus& c, double duration_s, double threshold_dbfs)
    : corpus_(&c), duration_(duration_s) {
  segments_.resize(c.size());
  audible_.resize(c.size());
  for (std::size_t p = 0; p < c.size(); ++p) {
    const Piece& piece = c.at(p);
    if (std::llround(duration_s * piece.audio.sample_rate()) <= static_cast<long long>(piece.audio.length()))
      segments_[p] = slice_segments(piece, duration_s, duration_s);
    for (int s = 0; s < static_cast<int>(segments_[p].size()); ++s) {
      auto [start, len] = sample_range(segments_[p][s], piece.audio.sample_rate());
      for (Instrument i : kAllInstruments) {
        std::span<const float> view(piece.audio.stem(i).samples.data() + start, len);
        if (!is_silent(view, threshold_dbfs)) audible_[p][index_of(i)].push_back(s);
      }
    }
  }
}

std::vector<std::size_t> SegmentTable::eligible_pieces(Instrument i, std::size_t min_count) const {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < audible_.size(); ++p)
    if (audible_[p][index_of(i)].size() >= min_count) out.push_back(p);
  return out;
}

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::s4: return "s4";
    case Provenance::pseudo_basic: return "pseudo_basic";
    case Provenance::pseudo_additional: return "pseudo_additional";
    case Provenance::abx: return "abx";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Triplet builders

Example render_example(const Corpus& c, const std::array<SegmentRef, kNumInstruments>& sources) {
  std::size_t len = 0;
  int sr = c.sample_rate();
  for (const auto& s : sources) {
    if (s.piece_id.empty()) continue;
    const std::size_t l = sample_range(s, sr).second;
    require(len == 0 || len == l, "render_example: sources have different durations");
    len = l;
  }
  require(len > 0, "render_example: all sources are empty");
  std::array<dsp::Waveform, kNumInstruments> stems;
  for (Instrument i : kAllInstruments) {
    const auto& s = sources[index_of(i)];
    if (s.piece_id.empty()) {
      stems[index_of(i)].sample_rate = sr;
      stems[index_of(i)].samples.assign(len, 0.0f);
    } else {
      stems[index_of(i)] = extract_stem(c, s, i);
    }
  }
  return {make_stem_set(std::move(stems)), sources};
}

namespace {

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  require(!v.empty(), "sampler: nothing to pick from");
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

// Random entry of `candidates` whose segment start differs from `avoid`.
int pick_segment(const SegmentTable& t, std::size_t piece, const std::vector<int>& candidates,
                 std::optional<double> avoid, Rng& rng, const char* what) {
  std::vector<int> pool;
  for (int s : candidates)
    if (!avoid || t.segments(piece)[s].start != *avoid) pool.push_back(s);
  require(!pool.empty(), std::string("sampler: piece '") + t.corpus().at(piece).id +
                             "' has no usable " + what + " segment");
  return pick(pool, rng);
}

std::vector<int> all_indices(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<int>(i);
  return v;
}

std::vector<std::size_t> without(std::vector<std::size_t> v, std::initializer_list<std::size_t> drop) {
  std::erase_if(v, [&](std::size_t x) { return std::find(drop.begin(), drop.end(), x) != drop.end(); });
  return v;
}

struct PseudoChoice {
  Example example;
  double target_start;
  double nontarget_start;
};

// Shared core of make_pseudo_piece; `nontarget_audible` restricts the
// non-target segment to ones where that instrument is audible.
PseudoChoice pseudo_piece(const SegmentTable& t, Instrument target, std::size_t tsrc, std::size_t osrc,
                          Rng& rng, const PseudoOptions& opts,
                          std::optional<Instrument> nontarget_audible = std::nullopt) {
  SegmentRef tseg;
  if (opts.target_segment) {
    tseg = *opts.target_segment;
  } else {
    const int ts = pick_segment(t, tsrc, t.audible(tsrc, target), opts.avoid_target_start, rng, "target");
    tseg = t.segments(tsrc)[ts];
  }
  const auto& ocands = nontarget_audible ? t.audible(osrc, *nontarget_audible)
                                         : all_indices(t.segments(osrc).size());
  const int os = pick_segment(t, osrc, ocands, opts.avoid_nontarget_start, rng, "non-target");
  const SegmentRef oseg = t.segments(osrc)[os];

  std::array<SegmentRef, kNumInstruments> sources;
  for (Instrument i : kAllInstruments) sources[index_of(i)] = (i == target) ? tseg : oseg;
  return {render_example(t.corpus(), sources), tseg.start, oseg.start};
}

}  // namespace

Triplet sample_s4_triplet(const SegmentTable& table, Instrument target, Rng& rng) {
  const auto anchors = table.eligible_pieces(target, 2);
  const auto any = table.eligible_pieces(target, 1);
  require(!anchors.empty() && any.size() >= 2,
          "sample_s4_triplet: corpus needs >= 2 pieces with audible '" + std::string(to_string(target)) +
              "' and one of them with >= 2 segments");
  const std::size_t ap = pick(anchors, rng);
  const auto& aud = table.audible(ap, target);
  const int s1 = pick(aud, rng);
  const int s2 = pick_segment(table, ap, aud, table.segments(ap)[s1].start, rng, "positive");
  const std::size_t np = pick(without(any, {ap}), rng);
  const int s3 = pick(table.audible(np, target), rng);

  auto normal = [&](std::size_t p, int s) {
    std::array<SegmentRef, kNumInstruments> src;
    src.fill(table.segments(p)[s]);
    return render_example(table.corpus(), src);
  };
  return {normal(ap, s1), normal(ap, s2), normal(np, s3), target, Provenance::s4};
}

Example make_pseudo_piece(const SegmentTable& table, Instrument target, const std::string& target_src,
                          const std::string& nontarget_src, Rng& rng, const PseudoOptions& opts) {
  const std::size_t tp = table.corpus().index_of_piece(target_src);
  const std::size_t op = table.corpus().index_of_piece(nontarget_src);
  return pseudo_piece(table, target, tp, op, rng, opts).example;
}

PseudoPair sample_pseudo_triplet(const SegmentTable& table, Instrument target, Rng& rng) {
  require(table.corpus().size() >= 3, "sample_pseudo_triplet: need >= 3 pieces, corpus has " +
                                          std::to_string(table.corpus().size()));
  std::vector<Instrument> others;
  for (Instrument i : kAllInstruments)
    if (i != target) others.push_back(i);
  const Instrument extra = pick(others, rng);

  const auto tsrc = table.eligible_pieces(target, 2);
  const auto tneg = table.eligible_pieces(target, 1);
  const auto osrc = table.eligible_pieces(extra, 2);
  const auto third = table.eligible_pieces(extra, 1);
  require(!tsrc.empty(), "sample_pseudo_triplet: no piece has two audible '" +
                             std::string(to_string(target)) + "' segments");

  const std::size_t pt = pick(tsrc, rng);
  const std::size_t po = pick(without(osrc, {pt}), rng);
  const std::size_t p3 = pick(without(third, {pt, po}), rng);
  const std::size_t pn = pick(without(tneg, {pt}), rng);

  const auto a = pseudo_piece(table, target, pt, po, rng, {}, extra);
  PseudoOptions popt;
  popt.avoid_target_start = a.target_start;
  auto p = pseudo_piece(table, target, pt, p3, rng, popt, extra);
  PseudoOptions nopt;
  nopt.avoid_nontarget_start = a.nontarget_start;
  auto n = pseudo_piece(table, target, pn, po, rng, nopt, extra);

  PseudoPair out;
  out.basic = {a.example, p.example, n.example, target, Provenance::pseudo_basic};
  // Same segments, roles of positive and negative swapped, another target.
  out.additional = {a.example, n.example, p.example, extra, Provenance::pseudo_additional};
  return out;
}

dsp::Waveform combination_mix(const StemSet& s, CombinationPattern p) {
  require(p.bits >= 1 && p.bits <= 31, "combination_mix: pattern must be a non-empty subset");
  std::vector<double> sum(s.length(), 0.0);
  for (Instrument i : kAllInstruments)
    if (p.has(i))
      for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += s.stem(i).samples[k];
  dsp::Waveform w;
  w.sample_rate = s.sample_rate();
  w.samples.resize(sum.size());
  for (std::size_t k = 0; k < sum.size(); ++k) w.samples[k] = static_cast<float>(s.gain * sum[k]);
  return w;
}

std::pair<dsp::Waveform, CombinationPattern> sample_combination_input(const StemSet& s, Rng& rng) {
  CombinationPattern p{static_cast<std::uint8_t>(std::uniform_int_distribution<int>(1, 31)(rng))};
  return {combination_mix(s, p), p};
}

PaftTriplets build_paft_triplets(const std::vector<ABXRecord>& records, Instrument target,
                                 const SegmentTable& table, PaftInput regime, Rng& rng) {
  PaftTriplets out;
  const Corpus& c = table.corpus();
  for (const auto& r : records) {
    if (r.instrument != target) continue;
    if (r.tied()) {
      ++out.ties_excluded;
      continue;
    }
    const SegmentRef& pos = r.majority_a() ? r.a : r.b;
    const SegmentRef& neg = r.majority_a() ? r.b : r.a;

    Triplet t;
    t.target = target;
    t.provenance = Provenance::abx;
    if (regime == PaftInput::clean) {
      auto clean = [&](const SegmentRef& s) {
        std::array<SegmentRef, kNumInstruments> src;
        src[index_of(target)] = s;
        return render_example(c, src);
      };
      t.anchor = clean(r.x);
      t.positive = clean(pos);
      t.negative = clean(neg);
    } else {
      require(std::abs(table.duration() - r.x.duration) < 1e-9,
              "build_paft_triplets: segment table duration differs from record '" + r.record_id + "'");
      const std::size_t px = c.index_of_piece(r.x.piece_id);
      std::vector<std::size_t> all(c.size());
      for (std::size_t i = 0; i < c.size(); ++i) all[i] = i;
      const std::size_t po = pick(without(all, {px}), rng);
      const std::size_t p3 = pick(without(all, {px, po}), rng);
      PseudoOptions ao, po_opt, no;
      ao.target_segment = r.x;
      po_opt.target_segment = pos;
      no.target_segment = neg;
      const auto a = pseudo_piece(table, target, px, po, rng, ao);
      no.avoid_nontarget_start = a.nontarget_start;
      t.anchor = a.example;
      t.positive = pseudo_piece(table, target, c.index_of_piece(pos.piece_id), p3, rng, po_opt).example;
      t.negative = pseudo_piece(table, target, c.index_of_piece(neg.piece_id), po, rng, no).example;
    }
    out.triplets.push_back(std::move(t));
  }
  return out;
}

}  // namespace inmsrl::corpus
