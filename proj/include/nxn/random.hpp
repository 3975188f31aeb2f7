#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace nxn {

// Deterministic random stream. The engine is std::mt19937_64 (fully specified
// by the standard); the real-valued transforms are implemented here so that
// streams are identical across standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Independent stream keyed by a seed and up to three counters, e.g.
  // (seed, epoch, sample index).
  static Rng from_counters(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                           std::uint64_t c = 0);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal (Box-Muller, caching the second variate).
  double normal();
  // Uniform index in [0, n).
  std::size_t index(std::size_t n);

  std::vector<double> normal_vector(std::size_t n);
  // Uniformly distributed point on the unit sphere in R^n.
  std::vector<double> unit_vector(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace nxn
