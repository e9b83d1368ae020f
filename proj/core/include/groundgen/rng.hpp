#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace groundgen {

// Seeded generator with platform-independent draws. The standard
// distributions are implementation-defined, so sampling is done here on top of
// the fully specified mt19937_64 engine.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Unbiased (rejection sampling).
  std::uint64_t index(std::uint64_t n);

  double normal();

  // Normal(0, stddev) truncated to [-2 stddev, 2 stddev] by resampling.
  double truncated_normal(double stddev);

  template <typename U>
  void shuffle(std::span<U> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Mixes several values into one seed (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace groundgen
