#pragma once

#include <cmath>
#include <cstdint>

namespace lagdiff {

// Counter-based generator: draw i of stream s under seed k is a pure function
// mix(k, s, i). No global state; callers own their streams and can fork
// independent substreams without coordination.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0)
      : base_(mix64(mix64(seed + 0x9E3779B97F4A7C15ull) ^
                    mix64(stream + 0xD1B54A32D192ED03ull))) {}

  uint64_t next_u64() {
    uint64_t z = base_ + (counter_++) * 0x9E3779B97F4A7C15ull;
    return mix64(z);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n) via rejection.
  uint64_t uniform_int(uint64_t n) {
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal via Box-Muller; pairs are cached, so a stream's draws are
  // a deterministic function of its draw index.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Rng fork(uint64_t substream) const {
    Rng r(0);
    r.base_ = mix64(base_ ^ mix64(substream + 0x2545F4914F6CDD1Dull));
    return r;
  }

  static uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

 private:
  uint64_t base_;
  uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// FNV-1a over raw bytes; used for checkpoint hashes and config hashes.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace lagdiff
