#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace mdi {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// xoshiro256++ generator with explicit state, so snapshots can persist and
/// restore it. All randomness in the project flows through this class; the
/// standard library distributions are avoided because their output is not
/// pinned by the standard.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], both inclusive.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = std::uint64_t(hi - lo) + 1;
    // Rejection sampling keeps the distribution exactly uniform.
    const std::uint64_t limit = ~std::uint64_t(0) - ~std::uint64_t(0) % span;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + int(v % span);
  }

  /// Standard normal via Box-Muller. The sine half of the pair is discarded
  /// so the full generator state stays in s_ (snapshot/restore exactness).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    return r * std::cos(a);
  }

  float normalf() { return float(normal()); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::size_t(uniform_int(0, int(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Draws k distinct indices from [0, n) in a seed-stable order.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[std::size_t(i)] = i;
    shuffle(idx);
    idx.resize(std::size_t(k));
    return idx;
  }

  /// Derives an independent generator for a child task.
  Rng fork() { return Rng(next_u64()); }

  std::array<std::uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { s_ = s; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  std::array<std::uint64_t, 4> s_{};
};

/// Seed-splitting scheme: every pipeline stage derives its seed from the
/// master seed and a unique stage key, e.g. "wgan/letters/seed=3". Stages are
/// therefore reorderable and independently reproducible.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view key) {
  std::uint64_t st = master ^ fnv1a64(key);
  return splitmix64(st);
}

}  // namespace mdi
