#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>
#include <vector>

#include "gmfc/rng.hpp"

using namespace gmfc;

TEST_CASE("draws are pure functions of (seed, stream, counter)") {
  const std::uint64_t strm = rng::stream(rng::purpose::brownian, 3, 7);
  const std::uint64_t ctr = rng::counter(12, 4);
  CHECK(rng::bits(42, strm, ctr) == rng::bits(42, strm, ctr));
  CHECK(rng::uniform01(42, strm, ctr) == rng::uniform01(42, strm, ctr));
  CHECK(rng::normal(42, strm, ctr) == rng::normal(42, strm, ctr));

  // Any key change moves the output.
  CHECK(rng::bits(42, strm, ctr) != rng::bits(43, strm, ctr));
  CHECK(rng::bits(42, strm, ctr) != rng::bits(42, strm + 1, ctr));
  CHECK(rng::bits(42, strm, ctr) != rng::bits(42, strm, ctr + 1));
}

TEST_CASE("stream packing keeps purposes, units and members disjoint") {
  std::set<std::uint64_t> seen;
  for (const auto p : {rng::purpose::initial, rng::purpose::brownian,
                       rng::purpose::sample, rng::purpose::sliced,
                       rng::purpose::scenario, rng::purpose::bernoulli,
                       rng::purpose::validation}) {
    for (std::uint64_t unit = 0; unit < 3; ++unit) {
      for (std::uint64_t member = 0; member < 3; ++member) {
        seen.insert(rng::stream(p, unit, member));
      }
    }
  }
  CHECK(seen.size() == 7u * 3u * 3u);

  // Counter packing likewise: distinct (step, draw) pairs map to distinct
  // counters within the documented field widths.
  std::set<std::uint64_t> ctrs;
  for (std::uint64_t step = 0; step < 16; ++step) {
    for (std::uint64_t draw = 0; draw < 16; ++draw) {
      ctrs.insert(rng::counter(step, draw));
    }
  }
  CHECK(ctrs.size() == 16u * 16u);
}

TEST_CASE("uniform draws stay strictly inside (0,1) and look uniform") {
  const std::uint64_t strm = rng::stream(rng::purpose::sample, 0, 0);
  double sum = 0.0;
  double min_v = 1.0;
  double max_v = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng::uniform01(9001, strm, static_cast<std::uint64_t>(i));
    CHECK(u > 0.0);
    CHECK(u < 1.0);
    sum += u;
    min_v = std::min(min_v, u);
    max_v = std::max(max_v, u);
  }
  // Mean of n uniforms has sd 1/sqrt(12 n) ~ 0.002; allow five sigma.
  CHECK(std::abs(sum / n - 0.5) < 5.0 / std::sqrt(12.0 * n));
  CHECK(min_v < 0.01);
  CHECK(max_v > 0.99);
}

TEST_CASE("normal quantile matches tabulated values and is antisymmetric") {
  CHECK(rng::normal_quantile(0.5) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(rng::normal_quantile(0.975) == doctest::Approx(1.9599639845400536).epsilon(1e-12));
  CHECK(rng::normal_quantile(0.84134474606854293) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(rng::normal_quantile(1e-10) == doctest::Approx(-6.3613409024040557).epsilon(1e-9));
  for (const double p : {0.001, 0.0123, 0.3, 0.45, 0.499}) {
    CHECK(rng::normal_quantile(p) ==
          doctest::Approx(-rng::normal_quantile(1.0 - p)).epsilon(1e-12));
  }
}

TEST_CASE("antithetic reflection of the uniform flips the normal draw exactly") {
  // Reflecting u -> 1 - u maps the inverse-CDF draw to its negative; this is
  // the identity the antithetic sampling paths rely on.
  const std::uint64_t strm = rng::stream(rng::purpose::initial, 2, 5);
  for (int i = 0; i < 32; ++i) {
    const double u = rng::uniform01(7, strm, static_cast<std::uint64_t>(i));
    CHECK(rng::normal_quantile(1.0 - u) ==
          doctest::Approx(-rng::normal_quantile(u)).epsilon(1e-12));
  }
}

TEST_CASE("stream_cursor replays the raw draws in counter order") {
  rng::stream_cursor cur(11, rng::purpose::scenario, 4, 9);
  const std::uint64_t strm = rng::stream(rng::purpose::scenario, 4, 9);
  for (std::uint64_t i = 0; i < 8; ++i) {
    CHECK(cur.next_uniform() == rng::uniform01(11, strm, i));
  }
}

TEST_CASE("derive_seed separates experiment cells") {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t a = 0; a < 8; ++a) {
    for (std::uint64_t b = 0; b < 8; ++b) {
      seeds.insert(rng::derive_seed(123, a, b));
    }
  }
  CHECK(seeds.size() == 64);
  CHECK(rng::derive_seed(123, 1, 2) == rng::derive_seed(123, 1, 2));
  CHECK(rng::derive_seed(123, 1, 2) != rng::derive_seed(124, 1, 2));
}

TEST_CASE("philox output passes a coarse equidistribution check") {
  // Bucket 64k draws into 16 bins; a catastrophic generator defect would show
  // up as a wildly uneven histogram.  chi^2 with 15 dof has sd ~ 5.5.
  const std::uint64_t strm = rng::stream(rng::purpose::sample, 1, 1);
  std::vector<int> bins(16, 0);
  const int n = 65536;
  for (int i = 0; i < n; ++i) {
    const double u = rng::uniform01(2718, strm, static_cast<std::uint64_t>(i));
    ++bins[static_cast<std::size_t>(std::min(15, static_cast<int>(u * 16.0)))];
  }
  const double expected = n / 16.0;
  double chi2 = 0.0;
  for (const int c : bins) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 60.0);  // ~8 sigma above the dof mean of 15
}
