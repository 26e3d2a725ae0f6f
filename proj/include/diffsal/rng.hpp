#pragma once

#include <cstdint>
#include <string_view>

namespace diffsal {

// Counter-based generator: every draw is a pure function of
// (key, counter), so streams keyed by (seed, step, purpose) never overlap
// and replay bit-for-bit on any platform.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : key_(mix(seed)) {}
  Rng(uint64_t seed, uint64_t step, std::string_view purpose);

  // A child stream; independent of the parent's position.
  Rng split(uint64_t tag) const;

  uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive bounds
  double normal();

  static uint64_t mix(uint64_t x);
  static uint64_t hash(std::string_view s);

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace diffsal
