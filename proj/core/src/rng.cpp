#include "gramclust/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace gramclust {

SeededRng::SeededRng(uint64_t seed, uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
  key_ = mix64(seed + 0x9e3779b97f4a7c15ULL * (stream_id + 1));
}

uint64_t SeededRng::at(uint64_t i) const {
  return mix64(key_ + 0x9e3779b97f4a7c15ULL * i);
}

uint64_t SeededRng::next_u64() { return at(counter_++); }

double SeededRng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) {
  return lo + (hi - lo) * next_double();
}

uint64_t SeededRng::uniform_int(uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_int: n must be >= 1");
  // Fixed-point multiply; bias is < 2^-64 per draw and fully deterministic.
  return static_cast<uint64_t>(
      (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

double SeededRng::normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  // Box-Muller on two fresh uniforms; u1 is kept away from zero.
  double u1 = 0.0;
  do {
    u1 = next_double();
  } while (u1 <= 0.0);
  double u2 = next_double();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  cached_ = r * std::sin(theta);
  have_cached_ = true;
  return r * std::cos(theta);
}

}  // namespace gramclust
