#pragma once

#include <cmath>
#include <cstdint>

#include "vbae/linalg.hpp"

namespace vbae {

// Counter-based generator. A stream is a pure function of its key words, so
// consumers keyed by e.g. (seed, user, epoch) produce the same draws whether
// they run serially or in parallel. Mixing is splitmix64.
class StreamRng {
 public:
  explicit StreamRng(std::uint64_t seed, std::uint64_t k1 = 0,
                     std::uint64_t k2 = 0, std::uint64_t k3 = 0) {
    state_ = mix(seed + 0x9E3779B97F4A7C15ULL);
    state_ = mix(state_ ^ mix(k1 + 0xBF58476D1CE4E5B9ULL));
    state_ = mix(state_ ^ mix(k2 + 0x94D049BB133111EBULL));
    state_ = mix(state_ ^ mix(k3 + 0xD6E8FEB86659FD93ULL));
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  // Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).
  std::uint64_t uniform_below(std::uint64_t n) {
    // Rejection-free modulo; bias is negligible for n << 2^64 and the result
    // stays deterministic across platforms, which is what we need.
    return next_u64() % n;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double gumbel() {
    double u = uniform();
    if (u < 1e-12) u = 1e-12;
    if (u > 1.0 - 1e-12) u = 1.0 - 1e-12;
    return -std::log(-std::log(u));
  }

  void fill_normal(Matrix& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = normal();
  }

  void fill_normal(Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal();
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Deterministic Fisher-Yates; std::shuffle is implementation-defined.
template <typename T>
void shuffle(std::vector<T>& v, StreamRng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace vbae
