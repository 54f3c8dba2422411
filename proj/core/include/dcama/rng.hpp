#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace dcama {

// splitmix64; fixed here so artifacts are reproducible across standard
// libraries (std distributions are implementation-defined).
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Sub-seed derivation: one user-facing seed fans out to independent streams
// for dataset generation, weight init, and episode sampling.
// derive_seed(seed, tag) = splitmix64(seed ^ fnv1a(tag)).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t s = seed ^ fnv1a(tag);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {
    // warm up so adjacent seeds decorrelate
    next();
    next();
  }

  std::uint64_t next() { return splitmix64(state_); }
  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    // rejection-free modulo is fine here; n is tiny relative to 2^64
    return next() % n;
  }

  int index(std::size_t n) { return static_cast<int>(uniform_int(n)); }

  double normal() {
    // Box-Muller, one value per call
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // first k of a shuffled [0,n) without materializing the rest
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      int j = i + static_cast<int>(uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(k));
    return idx;
  }

 private:
  std::uint64_t state_ = 0;
};

}  // namespace dcama
