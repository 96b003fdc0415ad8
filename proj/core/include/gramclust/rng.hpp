#pragma once

#include <cstdint>

namespace gramclust {

/// SplitMix64 finalizer; full avalanche on 64 bits.
constexpr uint64_t mix64(uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

/// Derive an independent sub-seed from a master seed and a salt.
constexpr uint64_t derive_seed(uint64_t master, uint64_t salt) {
  return mix64(master + 0x9e3779b97f4a7c15ULL * (salt + 1));
}

/// Counter-based random stream. The n-th draw is a pure function of
/// (seed, stream_id, n), so sequences are identical across runs, platforms
/// and thread counts. No std:: distributions anywhere; all derived draws
/// are hand-rolled to keep them bit-reproducible.
class SeededRng {
public:
  SeededRng(uint64_t seed, uint64_t stream_id);

  uint64_t seed() const { return seed_; }
  uint64_t stream_id() const { return stream_id_; }

  /// Raw draw at absolute position i in this stream (does not advance).
  uint64_t at(uint64_t i) const;

  uint64_t next_u64();

  /// Uniform on [0, 1) with 53 random bits.
  double next_double();

  /// Uniform on [lo, hi).
  double uniform(double lo, double hi);

  /// Uniform integer on [0, n); n must be >= 1.
  uint64_t uniform_int(uint64_t n);

  /// Standard normal via Box-Muller; draws are cached in pairs.
  double normal();

private:
  uint64_t seed_;
  uint64_t stream_id_;
  uint64_t key_;
  uint64_t counter_ = 0;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

/// The (row, col) entry of a seeded sign matrix: +1 or -1, each with
/// probability 1/2, depending only on (seed, row, col).
inline float sign_entry(uint64_t seed, uint64_t row, uint64_t col) {
  uint64_t h = mix64(mix64(seed ^ (row + 1) * 0xd1342543de82ef95ULL) ^
                     (col + 1) * 0xaf251af3b0f025b5ULL);
  return (h & 1) ? 1.0f : -1.0f;
}

}  // namespace gramclust
