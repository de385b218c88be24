#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace polyprobe::core {

// SplitMix64 generator. The whole state is one 64-bit word, so streams can be
// derived deterministically per module / per trial with split(). Distributions
// are implemented here instead of <random> so that results are identical
// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform();

  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Index drawn proportionally to non-negative weights (at least one > 0).
  std::size_t categorical(const std::vector<double>& weights);

  template <class T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

  // Independent child stream; does not advance this generator.
  Rng split(std::uint64_t stream) const;
  Rng split(std::string_view label) const;

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

// FNV-1a over bytes; used for stable content hashes (config hash, labels).
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace polyprobe::core
