#include "inmsrl/types.hpp"

#include <cstdio>

namespace inmsrl {

std::string_view to_string(Instrument i) {
  switch (i) {
    case Instrument::drums: return "drums";
    case Instrument::bass: return "bass";
    case Instrument::piano: return "piano";
    case Instrument::guitar: return "guitar";
    case Instrument::residuals: return "residuals";
  }
  return "unknown";
}

Instrument instrument_from_string(std::string_view name) {
  for (Instrument i : kAllInstruments)
    if (to_string(i) == name) return i;
  throw Error("unknown instrument '" + std::string(name) + "'");
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace inmsrl
