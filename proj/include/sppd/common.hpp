#pragma once
// Shared plumbing: error taxonomy, content hashing, float formatting, and the
// handful of flat-vector helpers every numeric module leans on.
//
// Error kinds map onto process exit codes at the CLI boundary: param_error is
// a usage/config mistake (exit 2), everything else is a runtime failure
// (exit 1).  Keep the taxonomy small; what matters is the message naming the
// offending entity, not a deep class hierarchy.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sppd {

enum class errkind {
  param,      // bad argument / config value -> usage error, exit 2
  domain,     // value outside the mathematical domain of an operation
  state,      // object used in a state that forbids the call
  structural, // malformed graph/tree shape (cycles, non-binary branching)
  data,       // integrity failure in datasets or files
  numeric,    // non-finite number where a finite one is required
};

class error : public std::runtime_error {
public:
  error(errkind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
  errkind kind() const { return kind_; }
  // Exit-code contract: 0 success, 1 runtime failure, 2 usage error.
  int exit_code() const { return kind_ == errkind::param ? 2 : 1; }

private:
  errkind kind_;
};

[[noreturn]] inline void fail(errkind k, const std::string& msg) { throw error(k, msg); }

// ---------------------------------------------------------------------------
// FNV-1a 64-bit. Used for dataset/checkpoint lineage hashes and the vocab
// fingerprint; not cryptographic, just stable and dependency-free.
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t fnv_offset = 0xcbf29ce484222325ull;
inline constexpr std::uint64_t fnv_prime = 0x100000001b3ull;

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = fnv_offset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= fnv_prime;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = fnv_offset) {
  return fnv1a(s.data(), s.size(), h);
}

template <class T>
std::uint64_t fnv1a_pod(const T& v, std::uint64_t h = fnv_offset) {
  static_assert(std::is_trivially_copyable_v<T>);
  return fnv1a(&v, sizeof(T), h);
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Doubles are always serialized via %.17g so that text artifacts round-trip
// bit-exactly (17 significant digits uniquely identify a binary64 value).
// ---------------------------------------------------------------------------

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Flat parameter-vector helpers. Losses and optimizers treat policy
// parameters as one contiguous vector<double>; these are the only BLAS-ish
// operations they need.
// ---------------------------------------------------------------------------

using vecd = std::vector<double>;

inline double dot(const vecd& a, const vecd& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const vecd& x, vecd& y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double norm2(const vecd& v) { return std::sqrt(dot(v, v)); }

inline bool all_finite(const vecd& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// -log sigmoid(x) computed as softplus(-x); stable for large |x| where the
// naive form overflows or rounds to -log(1) = 0 too early.
inline double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sum_exp(const vecd& xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace sppd
