#include "inmsrl/abx.hpp"

#include <algorithm>
#include <fstream>

namespace inmsrl {

using nlohmann::json;

std::string_view to_string(ABXCondition c) {
  return c == ABXCondition::all_diff ? "All-Diff" : "One-Shared";
}

ABXCondition abx_condition_from_string(std::string_view s) {
  if (s == "All-Diff") return ABXCondition::all_diff;
  if (s == "One-Shared") return ABXCondition::one_shared;
  throw Error("unknown ABX condition '" + std::string(s) + "'");
}

double ABXRecord::consensus() const {
  return total() == 0 ? 0.0 : static_cast<double>(std::max(votes_a, votes_b)) / total();
}

void validate(const ABXRecord& r) {
  require(r.votes_a >= 0 && r.votes_b >= 0 && r.total() >= 1,
          "ABX record '" + r.record_id + "' needs at least one vote");
  if (r.condition == ABXCondition::one_shared) {
    const bool sa = r.a.piece_id == r.x.piece_id;
    const bool sb = r.b.piece_id == r.x.piece_id;
    require(sa != sb, "ABX record '" + r.record_id +
                          "': One-Shared requires exactly one of A/B to share X's piece");
  }
}

json to_json(const ABXRecord& r) {
  return {{"record_id", r.record_id},
          {"instrument", std::string(to_string(r.instrument))},
          {"condition", std::string(to_string(r.condition))},
          {"x", corpus::to_json(r.x)},
          {"a", corpus::to_json(r.a)},
          {"b", corpus::to_json(r.b)},
          {"votes_a", r.votes_a},
          {"votes_b", r.votes_b}};
}

ABXRecord abx_from_json(const json& j) {
  ABXRecord r;
  try {
    r.record_id = j.at("record_id").get<std::string>();
    r.instrument = instrument_from_string(j.at("instrument").get<std::string>());
    r.condition = abx_condition_from_string(j.at("condition").get<std::string>());
    r.x = corpus::segment_from_json(j.at("x"));
    r.a = corpus::segment_from_json(j.at("a"));
    r.b = corpus::segment_from_json(j.at("b"));
    r.votes_a = j.at("votes_a").get<int>();
    r.votes_b = j.at("votes_b").get<int>();
  } catch (const json::exception& e) {
    throw Error(std::string("ABX record: ") + e.what());
  }
  validate(r);
  return r;
}

std::vector<ABXRecord> read_abx_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "read_abx_jsonl: cannot open " + path.string());
  std::vector<ABXRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(abx_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_abx_jsonl(const std::filesystem::path& path, const std::vector<ABXRecord>& records) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "write_abx_jsonl: cannot write " + path.string());
  for (const auto& r : records) os << to_json(r).dump() << "\n";
}

}  // namespace inmsrl
