#pragma once
// Deterministic random streams.
//
// Everything random in the lab flows from one named seed through explicit
// stream derivation, so a run is reproducible from (config, seed) alone and
// stays byte-identical across platforms.  That rules out std::*_distribution
// (implementation-defined sequences), so the generator is a self-contained
// splitmix64 with hand-rolled real/int/normal conversions.  splitmix64 is
// statistically strong enough for sampling toy policies and cheap enough to
// fork one stream per question/epoch.

#include <cmath>
#include <cstdint>

#include "sppd/common.hpp"

namespace sppd {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derive an independent child seed from (base, stream tag). Mixing both
// through the splitmix finalizer keeps adjacent tags (qid 0,1,2,...) from
// producing correlated streams the way `base + qid` would.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t s = base ^ (0x9e3779b97f4a7c15ull + (tag << 1));
  splitmix64(s);
  std::uint64_t t = s;
  return splitmix64(t);
}

class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // Burn one output so seed=0 does not start the stream at mix(0).
    splitmix64(state_);
  }

  std::uint64_t u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53 random bits - the full double mantissa.
  double real() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Multiply-shift bound; the modulo bias at
  // n << 2^64 is far below anything observable in 1e9 draws.
  std::uint64_t bounded(std::uint64_t n) {
    if (n == 0) fail(errkind::param, "Rng::bounded: n must be positive");
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = real(), u2 = real();
    while (u1 <= 0.0) u1 = real();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Sample an index from an unnormalized non-negative weight vector by
  // linear CDF scan. Fine at toy fan-outs (<= a few dozen weights).
  std::size_t pick(const vecd& weights) {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0 || !std::isfinite(w)) fail(errkind::numeric, "Rng::pick: bad weight");
      total += w;
    }
    if (total <= 0.0) fail(errkind::param, "Rng::pick: all weights zero");
    double x = real() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (x < acc) return i;
    }
    return weights.size() - 1;
  }

  Rng fork(std::uint64_t tag) { return Rng(derive_seed(u64(), tag)); }

private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sppd
