#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace fontctl {

// Seeded random stream. Identical seeds give bit-identical draws on one
// platform; the distributions below are implemented locally so results do not
// depend on the standard library's distribution algorithms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();

  // Independent deterministic substream keyed by a tag.
  Rng split(std::string_view tag) const;

  std::uint64_t seed() const { return seed_; }
  std::string serialize() const;
  static Rng deserialize(const std::string& state);

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Rng seeded_rng(std::uint64_t seed);

std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag);

}  // namespace fontctl
