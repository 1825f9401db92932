#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include <Eigen/Core>

namespace galign {

// Deterministic splitmix64 generator. Results are bitwise stable across
// platforms and thread counts; std::<random> distributions are not, which
// matters for dataset digests and resumable training.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    // Rejection to kill modulo bias.
    uint64_t limit = ~uint64_t(0) - ~uint64_t(0) % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (polar form avoided: needs rejection that
  // would make draw counts data-dependent; basic form keeps the stream fixed).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Eigen::Vector3d normal3() {
    Eigen::Vector3d v;
    v << normal(), normal(), normal();
    return v;
  }

  Eigen::Vector3d unit_axis() {
    Eigen::Vector3d v = normal3();
    double n = v.norm();
    while (n < 1e-12) {  // astronomically rare; keep determinism anyway
      v = normal3();
      n = v.norm();
    }
    return v / n;
  }

  Eigen::Vector3d uniform_box(double half_extent) {
    Eigen::Vector3d v;
    v << uniform(-half_extent, half_extent), uniform(-half_extent, half_extent),
        uniform(-half_extent, half_extent);
    return v;
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) {
    state_ = s;
    have_spare_ = false;
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// FNV-1a, used both for config digests and RNG stream derivation.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

// Derive an independent stream from a root seed, a purpose tag, and an index.
inline uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t index = 0) {
  uint64_t h = fnv1a(&root, sizeof(root));
  h = fnv1a(tag, h);
  h = fnv1a(&index, sizeof(index), h);
  return h;
}

inline Rng derive_rng(uint64_t root, std::string_view tag, uint64_t index = 0) {
  return Rng(derive_seed(root, tag, index));
}

}  // namespace galign
