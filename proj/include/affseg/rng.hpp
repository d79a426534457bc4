// Seeded RNG with explicit value mapping, so streams are identical across
// compilers and standard libraries (std distributions are not portable).
#pragma once

#include <cstdint>
#include <random>

namespace affseg {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  float uniform_range(float lo, float hi) {
    return lo + static_cast<float>(uniform()) * (hi - lo);
  }

  // uniform integer in [lo, hi] inclusive
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(engine_() % span);
  }

  bool coin() { return (engine_() & 1u) != 0; }

  // derive an independent stream for a labelled sub-task
  Rng fork(std::uint64_t salt) {
    return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ull));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace affseg
