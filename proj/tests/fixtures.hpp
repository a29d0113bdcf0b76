#pragma once

#include <filesystem>
#include <string>

#include "inmsrl/corpus.hpp"

namespace fixtures {

/// Six 12-second pieces at 8 kHz, shared by the tests of one binary.
inline const inmsrl::corpus::Corpus& small_corpus() {
  static const auto sc = inmsrl::corpus::synth_corpus(6, 12.0, 5, 8000);
  return sc.corpus;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / ("inmsrl_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace fixtures
