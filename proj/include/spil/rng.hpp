#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace spil {

/// Seeded random stream with deterministic sub-stream derivation.
///
/// Every consumer of randomness in the trainer owns its own RngStream. Streams
/// are derived from (seed, salt, index) through std::seed_seq, so the sequence
/// a consumer sees never depends on how much another consumer has drawn.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);
  RngStream(std::uint64_t seed, std::uint64_t salt, std::uint64_t index);

  /// Independent child stream; does not advance this stream.
  [[nodiscard]] RngStream derive(std::uint64_t index) const;
  [[nodiscard]] RngStream derive(std::uint64_t salt, std::uint64_t index) const;

  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in [low, high); returns low exactly when low == high.
  double uniform(double low, double high);
  /// Standard normal draw.
  double normal();

  [[nodiscard]] std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t salt_;
  std::uint64_t index_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> gaussian_{0.0, 1.0};
};

/// Stable 64-bit tag for a string, used to name stream salts.
constexpr std::uint64_t stream_salt(std::string_view name) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : name) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

}  // namespace spil
