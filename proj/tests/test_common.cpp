#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>

#include "sppd/common.hpp"
#include "sppd/rng.hpp"

using namespace sppd;

TEST_CASE("error kinds map to the exit-code contract") {
  // Only param is a usage error (exit 2); every runtime kind exits 1.
  CHECK(error(errkind::param, "x").exit_code() == 2);
  for (errkind k : {errkind::domain, errkind::state, errkind::structural, errkind::data,
                    errkind::numeric}) {
    CHECK(error(k, "x").exit_code() == 1);
  }
  try {
    fail(errkind::data, "broken thing");
    FAIL("fail() returned");
  } catch (const error& e) {
    CHECK(e.kind() == errkind::data);
    CHECK(std::string(e.what()) == "broken thing");
  }
}

TEST_CASE("fnv1a matches published 64-bit test vectors") {
  // Reference values from the FNV spec's vector list (offset basis and the
  // classic "a"/"foobar" probes).
  CHECK(fnv1a(std::string{}) == 0xcbf29ce484222325ull);
  CHECK(fnv1a(std::string{"a"}) == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a(std::string{"foobar"}) == 0x85944171f73967e8ull);
}

TEST_CASE("fnv1a chains byte-at-a-time") {
  // Hashing "ab" in one call must equal feeding "b" the hash of "a"; all the
  // lineage hashes rely on this to mix fields incrementally.
  CHECK(fnv1a(std::string{"ab"}) == 0x089c4407b545986aull);
  CHECK(fnv1a(std::string{"b"}, fnv1a(std::string{"a"})) == fnv1a(std::string{"ab"}));

  std::uint8_t byte = 'a';
  CHECK(fnv1a_pod(byte) == fnv1a(std::string{"a"}));
}

TEST_CASE("hex64 is fixed-width lowercase and inverts via strtoull") {
  CHECK(hex64(0) == "0000000000000000");
  CHECK(hex64(0xdeadbeefull) == "00000000deadbeef");
  CHECK(hex64(~0ull) == "ffffffffffffffff");

  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    std::uint64_t v = rng.u64();
    std::string s = hex64(v);
    CHECK(s.size() == 16);
    CHECK(std::strtoull(s.c_str(), nullptr, 16) == v);
  }
}

TEST_CASE("fmt_g17 round-trips arbitrary finite doubles bit-exactly") {
  // 17 significant digits are the minimum that uniquely identify a binary64
  // value, so strtod(fmt_g17(x)) must reproduce x's exact bit pattern.
  Rng rng(42);
  int checked = 0;
  while (checked < 5000) {
    std::uint64_t bits = rng.u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    if (!std::isfinite(v)) continue;
    double back = std::strtod(fmt_g17(v).c_str(), nullptr);
    std::uint64_t back_bits;
    std::memcpy(&back_bits, &back, sizeof back);
    REQUIRE(back_bits == bits);
    ++checked;
  }
  // A few handpicked awkward values: non-terminating binary fractions and a
  // subnormal.
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 5e-324, -0.0}) {
    CHECK(std::strtod(fmt_g17(v).c_str(), nullptr) == v);
  }
}

TEST_CASE("softplus agrees with a 40-digit decimal oracle and is stable") {
  // Reference value computed with 40-digit decimal arithmetic:
  //   log(1 + exp(0.476)) = 0.9592057725722810214...
  CHECK(softplus(0.476) == doctest::Approx(0.9592057725722810214).epsilon(1e-15));
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-16));

  // Large arguments: the stable form degrades gracefully instead of
  // overflowing (naive log(1+exp(1000)) is inf).
  CHECK(softplus(1000.0) == 1000.0);
  CHECK(softplus(-1000.0) == 0.0);

  // softplus(x) - softplus(-x) == x holds exactly in real arithmetic.
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    double x = (rng.real() - 0.5) * 60.0;
    CHECK(softplus(x) - softplus(-x) == doctest::Approx(x).epsilon(1e-13));
    // Against the naive form where it does not overflow.
    if (std::abs(x) < 20.0)
      CHECK(softplus(x) == doctest::Approx(std::log(1.0 + std::exp(x))).epsilon(1e-13));
  }
}

TEST_CASE("sigmoid is symmetric and consistent with softplus") {
  CHECK(sigmoid(0.0) == 0.5);
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    double x = (rng.real() - 0.5) * 80.0;
    CHECK(sigmoid(x) + sigmoid(-x) == doctest::Approx(1.0).epsilon(1e-15));
    // sigma(x) = exp(-softplus(-x)); the loss code uses both forms.
    CHECK(sigmoid(x) == doctest::Approx(std::exp(-softplus(-x))).epsilon(1e-13));
  }
  CHECK(sigmoid(40.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(sigmoid(-40.0) < 1e-17);
}

TEST_CASE("log_sum_exp matches the naive form and is shift-invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    vecd xs(1 + rng.bounded(8));
    for (double& x : xs) x = (rng.real() - 0.5) * 10.0;
    double naive = 0.0;
    for (double x : xs) naive += std::exp(x);
    naive = std::log(naive);
    CHECK(log_sum_exp(xs) == doctest::Approx(naive).epsilon(1e-13));

    // lse(x + c) = lse(x) + c for any constant shift; this is what makes the
    // max-subtraction trick valid.
    double c = (rng.real() - 0.5) * 1000.0;
    vecd shifted = xs;
    for (double& x : shifted) x += c;
    CHECK(log_sum_exp(shifted) == doctest::Approx(log_sum_exp(xs) + c).epsilon(1e-12));
  }

  // Values the naive form cannot reach.
  CHECK(log_sum_exp({1000.0, 1000.0}) == doctest::Approx(1000.0 + std::log(2.0)));
  double ninf = -std::numeric_limits<double>::infinity();
  CHECK(log_sum_exp({ninf, 0.0}) == doctest::Approx(0.0));
  CHECK(log_sum_exp({}) == ninf);
}

TEST_CASE("vector helpers compute what their names say") {
  vecd a{1.0, 2.0, 3.0}, b{4.0, -5.0, 6.0};
  CHECK(dot(a, b) == 12.0);
  CHECK(norm2({3.0, 4.0}) == 5.0);

  vecd y{1.0, 1.0, 1.0};
  axpy(2.0, a, y);
  CHECK(y == vecd{3.0, 5.0, 7.0});

  CHECK(all_finite({0.0, -1.5, 1e300}));
  CHECK_FALSE(all_finite({0.0, std::nan("")}));
  CHECK_FALSE(all_finite({std::numeric_limits<double>::infinity()}));
}

TEST_CASE("splitmix64 reproduces the reference sequence") {
  // First three outputs for state 1234567, from the reference splitmix64.c.
  std::uint64_t s = 1234567;
  CHECK(splitmix64(s) == 6457827717110365317ull);
  CHECK(splitmix64(s) == 3203168211198807973ull);
  CHECK(splitmix64(s) == 9817491932198370423ull);
}

TEST_CASE("Rng streams are deterministic and seed-sensitive") {
  Rng a(99), b(99), c(100);
  bool all_equal = true, any_equal_c = false;
  for (int i = 0; i < 64; ++i) {
    std::uint64_t va = a.u64();
    all_equal = all_equal && va == b.u64();
    any_equal_c = any_equal_c || va == c.u64();
  }
  CHECK(all_equal);
  CHECK_FALSE(any_equal_c);
}

TEST_CASE("Rng::real covers [0,1) and bounded respects its bound") {
  Rng rng(11);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 20000; ++i) {
    double r = rng.real();
    REQUIRE(r >= 0.0);
    REQUIRE(r < 1.0);
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);

  for (int i = 0; i < 20000; ++i) REQUIRE(rng.bounded(7) < 7);
  CHECK_THROWS_AS(rng.bounded(0), error);
}

TEST_CASE("Rng::normal has standard moments") {
  Rng rng(123);
  const int n = 50000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    sum += x;
    sumsq += x * x;
  }
  double mean = sum / n;
  double var = sumsq / n - mean * mean;
  // 4-sigma bands for the sample mean (sd 1/sqrt(n)) and variance (sd ~sqrt(2/n)).
  CHECK(std::abs(mean) < 4.0 / std::sqrt(double(n)));
  CHECK(std::abs(var - 1.0) < 4.0 * std::sqrt(2.0 / n));
}

TEST_CASE("Rng::pick follows the weights and rejects bad ones") {
  Rng rng(17);
  int counts[3] = {0, 0, 0};
  const int n = 30000;
  for (int i = 0; i < n; ++i) ++counts[rng.pick({1.0, 0.0, 3.0})];
  CHECK(counts[1] == 0);  // zero weight is never chosen
  CHECK(std::abs(counts[0] / double(n) - 0.25) < 0.02);
  CHECK(std::abs(counts[2] / double(n) - 0.75) < 0.02);

  CHECK_THROWS_AS(rng.pick({1.0, -0.5}), error);
  CHECK_THROWS_AS(rng.pick({1.0, std::nan("")}), error);
  try {
    rng.pick({0.0, 0.0});
    FAIL("all-zero weights accepted");
  } catch (const error& e) {
    CHECK(e.kind() == errkind::param);
  }
}

TEST_CASE("derive_seed decorrelates adjacent tags") {
  // Child streams for tags 0..15 under the same base must all differ; the
  // whole point of the finalizer mix is that nearby tags do not collide.
  std::uint64_t seen[16];
  for (std::uint64_t t = 0; t < 16; ++t) {
    seen[t] = derive_seed(1, t);
    for (std::uint64_t u = 0; u < t; ++u) REQUIRE(seen[t] != seen[u]);
  }
  CHECK(derive_seed(1, 0) == derive_seed(1, 0));
  CHECK(derive_seed(2, 0) != derive_seed(1, 0));

  Rng base(5);
  Rng f1 = base.fork(1);
  // fork() consumes one state update, so successive forks differ even with
  // the same tag.
  Rng f2 = base.fork(1);
  CHECK(f1.u64() != f2.u64());
}
