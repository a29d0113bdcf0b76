#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace inmsrl {

/// Raised for every contract violation in the library. Messages name the
/// offending input so CLI users can act on them.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

enum class Instrument : int { drums = 0, bass = 1, piano = 2, guitar = 3, residuals = 4 };

inline constexpr int kNumInstruments = 5;

inline constexpr std::array<Instrument, kNumInstruments> kAllInstruments = {
    Instrument::drums, Instrument::bass, Instrument::piano, Instrument::guitar,
    Instrument::residuals};

/// Instruments that get a dedicated separator/extractor in the cascaded models.
inline constexpr std::array<Instrument, 4> kCascadeInstruments = {
    Instrument::drums, Instrument::bass, Instrument::piano, Instrument::guitar};

inline constexpr int index_of(Instrument i) { return static_cast<int>(i); }

std::string_view to_string(Instrument i);
Instrument instrument_from_string(std::string_view name);

/// 64-bit FNV-1a, used for parameter and config fingerprints.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t h);

}  // namespace inmsrl
