#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mtp {

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for a named stream under a master seed. Every tensor and every
// experiment component draws from its own stream so adding a parameter never
// perturbs the others.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name,
                                 std::uint64_t counter = 0) {
  return splitmix64(fnv1a64(name, splitmix64(master)) ^ splitmix64(counter));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t master, std::string_view name, std::uint64_t counter = 0)
      : engine_(derive_seed(master, name, counter)) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  // Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }

  template <class Real>
  std::vector<Real> normal_vector(std::size_t n, double stddev) {
    std::vector<Real> out(n);
    for (auto& v : out) v = static_cast<Real>(normal(0.0, stddev));
    return out;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mtp
