#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace coffee {

// Error taxonomy mirrored by the CLI exit codes: validation -> 1, I/O -> 2,
// numerical failure -> 3.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Deterministic RNG with fully specified output mapping. std::mt19937_64 has
/// a standardized sequence, and the value mappings below avoid the
/// implementation-defined std::*_distribution algorithms, so streams are
/// reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n) {
    // Rejection sampling keeps the mapping exact and unbiased.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  int index(int n) { return static_cast<int>(below(static_cast<uint64_t>(n))); }

  /// Standard normal via Box-Muller (no cached spare; one value per call).
  double gaussian() {
    double u1 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  /// Derive an independent child stream, e.g. one per pipeline stage.
  Rng fork(uint64_t salt) {
    return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ull));
  }

  /// k distinct indices from [0, n), order given by the draw sequence.
  std::vector<int> sample_distinct(int k, int n) {
    std::vector<int> out;
    out.reserve(k);
    while (static_cast<int>(out.size()) < k) {
      const int candidate = index(n);
      bool seen = false;
      for (int v : out) seen = seen || (v == candidate);
      if (!seen) out.push_back(candidate);
    }
    return out;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace coffee
