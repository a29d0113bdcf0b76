#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inmsrl/corpus.hpp"

namespace inmsrl {

enum class ABXCondition { all_diff, one_shared };

std::string_view to_string(ABXCondition c);
ABXCondition abx_condition_from_string(std::string_view s);

/// One "which of A or B is more similar to X" item with its vote tally.
struct ABXRecord {
  std::string record_id;
  Instrument instrument = Instrument::drums;
  ABXCondition condition = ABXCondition::all_diff;
  corpus::SegmentRef x, a, b;
  int votes_a = 0;
  int votes_b = 0;

  int total() const { return votes_a + votes_b; }
  bool tied() const { return votes_a == votes_b; }
  bool majority_a() const { return votes_a > votes_b; }
  double consensus() const;
};

/// Throws on a violated record invariant.
void validate(const ABXRecord& r);

nlohmann::json to_json(const ABXRecord& r);
ABXRecord abx_from_json(const nlohmann::json& j);

std::vector<ABXRecord> read_abx_jsonl(const std::filesystem::path& path);
void write_abx_jsonl(const std::filesystem::path& path, const std::vector<ABXRecord>& records);

}  // namespace inmsrl
