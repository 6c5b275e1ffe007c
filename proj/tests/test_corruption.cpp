#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "blockdiff/corruption.hpp"

using namespace blockdiff;

namespace {

constexpr Token kMask = 99;

double binom_pmf(int n, int k, double p) {
  return std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0)) * std::pow(p, k) *
         std::pow(1.0 - p, n - k);
}

}  // namespace

TEST_CASE("linear rate and weights") {
  CHECK(mask_rate_linear(0.0) == 0.0);
  CHECK(mask_rate_linear(1.0) == 1.0);
  CHECK(mask_rate_linear(0.37) == 0.37);
  CHECK_THROWS_AS(mask_rate_linear(-0.1), std::domain_error);
  CHECK_THROWS_AS(mask_rate_linear(1.1), std::domain_error);

  Rng rng(1);
  TokenSeq x(10, 3);
  auto s = corrupt_full(x, 0.1, rng, kMask);
  CHECK(s.token_weight == doctest::Approx(10.0).epsilon(1e-12));
  auto none = corrupt_full(x, 0.0, rng, kMask);
  CHECK(none.masked_count() == 0);
  auto all = corrupt_full(x, 1.0, rng, kMask);
  CHECK(all.masked_count() == 10);
  CHECK(all.token_weight == 1.0);
  for (Token t : all.xt) CHECK(t == kMask);
}

TEST_CASE("block rate clipping") {
  CHECK(clip_block_rate(0.1, 4) == 0.25);
  CHECK(clip_block_rate(0.6, 4) == 0.6);
  CHECK(clip_block_rate(0.0, 1) == 1.0);
  CHECK(clip_block_rate(1.0, 8) == 1.0);
  CHECK(clip_block_rate(0.0, 8) == 0.125);
  CHECK_THROWS(clip_block_rate(0.5, 0));
  for (int b : {1, 2, 3, 4, 8, 16}) {
    for (int k = 0; k <= 100; ++k) {
      const double u = clip_block_rate(k / 100.0, b);
      CHECK(u >= 1.0 / b);
      CHECK(u <= 1.0);
      CHECK(1.0 / u <= b + 1e-12);
    }
  }
}

TEST_CASE("full corruption masks each eligible position with probability t") {
  Rng rng(2);
  const int n = 12;
  const double t = 0.3;
  const long reps = 20000;
  std::vector<long> hist(n + 1, 0);
  TokenSeq x(n, 5);
  std::vector<std::uint8_t> elig(n, 1);
  elig[0] = 0;  // e.g. BOS
  for (long r = 0; r < reps; ++r) {
    auto s = corrupt_full(x, t, rng, kMask, elig);
    CHECK_FALSE(s.mask_flags[0]);
    ++hist[static_cast<std::size_t>(s.masked_count())];
  }
  for (int k = 0; k < n; ++k) {
    const double p = binom_pmf(n - 1, k, t);
    const double sd = std::sqrt(reps * p * (1 - p));
    INFO("k=" << k);
    CHECK(std::abs(hist[static_cast<std::size_t>(k)] - reps * p) <= 3 * sd + 1);
  }
  CHECK(hist[n] == 0);
}

TEST_CASE("block corruption touches only its block and never returns zero masks") {
  Rng rng(3);
  TokenSeq x{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  for (int rep = 0; rep < 2000; ++rep) {
    const int b = 1 + static_cast<int>(rng.uniform_index(4));
    const int nb = (10 + b - 1) / b;
    const int blk = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(nb)));
    const double u = clip_block_rate(rng.uniform(), b);
    auto s = corrupt_block(x, blk, b, u, rng, kMask);
    REQUIRE(s.masked_count() >= 1);
    for (int i = 0; i < 10; ++i) {
      const bool inside = i / b == blk;
      if (!inside) REQUIRE_FALSE(s.mask_flags[static_cast<std::size_t>(i)]);
      REQUIRE((s.xt[static_cast<std::size_t>(i)] == kMask) == static_cast<bool>(s.mask_flags[static_cast<std::size_t>(i)]));
    }
    CHECK(s.token_weight == doctest::Approx(1.0 / u));
  }
  auto one = corrupt_block(x, 3, 1, 1.0, rng, kMask);
  CHECK(one.masked_count() == 1);
  CHECK(one.mask_flags[3]);
  CHECK_THROWS_AS(corrupt_block(x, 0, 4, 0.1, rng, kMask), std::domain_error);
  CHECK_THROWS_AS(corrupt_block(x, 3, 4, 0.5, rng, kMask), std::out_of_range);
  std::vector<std::uint8_t> elig(10, 1);
  elig[0] = elig[1] = 0;
  CHECK_THROWS_AS(corrupt_block(x, 0, 2, 0.5, rng, kMask, elig), std::invalid_argument);
}

TEST_CASE("block size 1 always masks its token") {
  Rng rng(4);
  TokenSeq x{4, 4, 4};
  for (int i = 0; i < 1000; ++i) {
    auto s = corrupt_block(x, 1, 1, clip_block_rate(rng.uniform(), 1), rng, kMask);
    REQUIRE(s.masked_count() == 1);
    REQUIRE(s.token_weight == 1.0);
  }
}

TEST_CASE("zero-mask fraction: analytic values") {
  CHECK(zero_mask_fraction_analytic(2) == doctest::Approx(1.0 / 3));
  CHECK(zero_mask_fraction_analytic(4) == doctest::Approx(0.2));
  CHECK(zero_mask_fraction_analytic(8) == doctest::Approx(1.0 / 9));
}

TEST_CASE("schedule statistics") {
  Rng rng(5);
  auto un = schedule_stats(4, false, 1000000, rng);
  CHECK(std::abs(un.zero_mask_fraction - 0.2) < 0.002);
  CHECK(un.min_masked == 0);
  auto cl = schedule_stats(4, true, 1000000, rng);
  CHECK(cl.zero_mask_fraction == 0.0);
  CHECK(cl.min_masked >= 1);
  CHECK(cl.max_weight <= 4.0);
  CHECK(cl.min_u_eff >= 0.25);
  CHECK(cl.max_u_eff <= 1.0);
}

TEST_CASE("fallback leaves non-forced patterns Bernoulli and forces uniformly") {
  for (int width = 1; width <= 4; ++width) {
    for (double u : {0.25, 0.5, 0.8}) {
      Rng rng(6, static_cast<std::uint64_t>(width));
      const long reps = 40000;
      std::vector<long> by_pattern(1u << width, 0);
      std::vector<long> forced_pos(static_cast<std::size_t>(width), 0);
      long forced = 0;
      for (long r = 0; r < reps; ++r) {
        bool f = false;
        auto p = sample_block_pattern(width, u, rng, true, &f);
        REQUIRE(std::count(p.begin(), p.end(), std::uint8_t{1}) >= 1);
        if (f) {
          ++forced;
          REQUIRE(std::count(p.begin(), p.end(), std::uint8_t{1}) == 1);
          for (int i = 0; i < width; ++i) forced_pos[static_cast<std::size_t>(i)] += p[static_cast<std::size_t>(i)];
          continue;
        }
        unsigned code = 0;
        for (int i = 0; i < width; ++i) code |= static_cast<unsigned>(p[static_cast<std::size_t>(i)]) << i;
        ++by_pattern[code];
      }
      // ~50 cells per run, so 4 sigma keeps the family-wise false alarm rate low.
      const double p0 = std::pow(1 - u, width);
      CHECK(std::abs(forced - reps * p0) <= 4 * std::sqrt(reps * p0 * (1 - p0)) + 1);
      for (unsigned code = 1; code < by_pattern.size(); ++code) {
        const int k = std::popcount(code);
        const double p = std::pow(u, k) * std::pow(1 - u, width - k);
        INFO("width " << width << " u " << u << " code " << code);
        CHECK(std::abs(by_pattern[code] - reps * p) <= 4 * std::sqrt(reps * p * (1 - p)) + 1);
      }
      for (int i = 0; i < width; ++i) {
        const double q = 1.0 / width;
        CHECK(std::abs(forced_pos[static_cast<std::size_t>(i)] - forced * q) <= 4 * std::sqrt(forced * q * (1 - q)) + 1);
      }
    }
  }
}

TEST_CASE("full and block corruption share the Bernoulli law without fallback") {
  const int w = 6;
  const double u = 0.4;
  const long reps = 30000;
  Rng a(7), b(8);
  std::vector<long> ha(w + 1, 0), hb(w + 1, 0);
  TokenSeq x(w, 1);
  for (long r = 0; r < reps; ++r) {
    ++ha[static_cast<std::size_t>(corrupt_full(x, u, a, kMask).masked_count())];
    auto p = sample_block_pattern(w, u, b, false);
    ++hb[static_cast<std::size_t>(std::count(p.begin(), p.end(), std::uint8_t{1}))];
  }
  for (int k = 0; k <= w; ++k) {
    const double p = binom_pmf(w, k, u);
    const double sd = std::sqrt(reps * p * (1 - p));
    CHECK(std::abs(ha[static_cast<std::size_t>(k)] - reps * p) <= 3 * sd + 1);
    CHECK(std::abs(hb[static_cast<std::size_t>(k)] - reps * p) <= 3 * sd + 1);
  }
}

TEST_CASE("a million clipped samples never end with zero masks") {
  Rng rng(9);
  long zero = 0;
  for (long i = 0; i < 1000000; ++i) {
    const double u = clip_block_rate(rng.uniform(), 4);
    auto p = sample_block_pattern(4, u, rng, true);
    zero += std::count(p.begin(), p.end(), std::uint8_t{1}) == 0;
  }
  CHECK(zero == 0);
}

TEST_CASE("corruption is deterministic per seed") {
  TokenSeq x(20, 2);
  Rng a(11), b(11);
  for (int i = 0; i < 50; ++i) {
    CHECK(corrupt_full(x, 0.5, a, kMask).mask_flags == corrupt_full(x, 0.5, b, kMask).mask_flags);
  }
}
