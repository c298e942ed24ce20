#pragma once

#include <cstdint>
#include <random>

namespace cfdistill {

/// Seedable generator with a stable stream on every platform.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. Distribution transforms are implemented here rather than taken
/// from <random>, because the standard distributions are allowed to differ
/// between library vendors.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal (Marsaglia polar method).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Seed for an independent sub-stream (per worker, per scenario, ...).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

}  // namespace cfdistill
