#include "spil/rng.hpp"

#include <array>

namespace spil {
namespace {

std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t salt,
                            std::uint64_t index) {
  const std::array<std::uint32_t, 6> words = {
      static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
      static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32),
      static_cast<std::uint32_t>(index),
      static_cast<std::uint32_t>(index >> 32)};
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

// Combines a parent's identity into the salt of a child so nested
// derivations stay distinct from flat ones.
std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed) : RngStream(seed, 0, 0) {}

RngStream::RngStream(std::uint64_t seed, std::uint64_t salt,
                     std::uint64_t index)
    : seed_(seed),
      salt_(salt),
      index_(index),
      engine_(make_engine(seed, salt, index)) {}

RngStream RngStream::derive(std::uint64_t index) const {
  return derive(0, index);
}

RngStream RngStream::derive(std::uint64_t salt, std::uint64_t index) const {
  return RngStream(seed_, mix(mix(salt_, index_), salt), index);
}

double RngStream::uniform() {
  // 53 random mantissa bits.
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double low, double high) {
  if (low == high) return low;
  return low + (high - low) * uniform();
}

double RngStream::normal() { return gaussian_(engine_); }

}  // namespace spil
