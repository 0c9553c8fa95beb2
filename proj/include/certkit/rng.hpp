#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace certkit {

// Deterministic splitmix64 generator. The standard <random> distributions are
// implementation-defined, so all sampling goes through this class to keep
// runs byte-reproducible across compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (one value per call, cached pair dropped
  // to keep the consumption pattern obvious).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

// Every random component draws its seed from the single top-level run seed
// through this derivation: sub-seed = splitmix(master ^ fnv1a(tag) ^ index).
// Streams with distinct tags are independent, so e.g. the batch-shuffle
// stream never interacts with attack-noise streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a offset basis
  for (char c : tag) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 1099511628211ULL;
  }
  Rng mix(master ^ h ^ (index * 0x9e3779b97f4a7c15ULL + 0x243f6a8885a308d3ULL));
  return mix.next_u64();
}

}  // namespace certkit
