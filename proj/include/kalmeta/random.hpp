#pragma once

#include <cstdint>
#include <limits>

#include "kalmeta/common.hpp"

namespace kalmeta {

// Counter-free key mixing (splitmix64). Used to derive independent child
// streams from (seed, key...) so that per-agent / per-particle randomness is
// reproducible regardless of evaluation order.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t combine_keys(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b + 0x632be59bd9b4e019ull));
}

// Deterministic random stream: xoshiro-free, stdlib-free generation so the
// byte stream is identical across platforms and library versions. Normals use
// Box-Muller with no cached spare (two uniforms per draw).
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed)
      : key_(mix64(seed)), state_(mix64(seed)) {}

  // Children derive from the stream's identity key, never from its draw
  // position, so substream contents do not depend on when they are forked.
  RandomStream child(std::uint64_t key) const {
    return RandomStream(combine_keys(key_, key));
  }
  RandomStream child(std::uint64_t k1, std::uint64_t k2) const {
    return RandomStream(combine_keys(combine_keys(key_, k1), k2));
  }

  std::uint64_t next_u64() {
    state_ = state_ * 6364136223846793005ull + 1442695040888963407ull;
    std::uint64_t x = state_;
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdull;
    x ^= x >> 33;
    x *= 0xc4ceb9fe1a85ec53ull;
    x ^= x >> 33;
    return x;
  }

  // Uniform in (0, 1]; never returns 0 so log() is safe.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  Vec normal_vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Mat normal_mat(int r, int c) {
    Mat m(r, c);
    for (int j = 0; j < c; ++j)
      for (int i = 0; i < r; ++i) m(i, j) = normal();
    return m;
  }

  int uniform_int(int n) {  // in [0, n)
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

 private:
  std::uint64_t key_;
  std::uint64_t state_;
};

}  // namespace kalmeta
