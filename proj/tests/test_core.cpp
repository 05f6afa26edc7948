#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "emstop/image.hpp"
#include "emstop/kl.hpp"
#include "emstop/rng.hpp"

using namespace emstop;

namespace {

// Upper chi-square quantile via the Wilson-Hilferty cube approximation;
// plenty accurate for a goodness-of-fit threshold.
double chi2_quantile(double df, double z) {
  const double a = 2.0 / (9.0 * df);
  const double t = 1.0 - a + z * std::sqrt(a);
  return df * t * t * t;
}

double poisson_log_pmf(double k, double mean) {
  return k * std::log(mean) - mean - std::lgamma(k + 1.0);
}

// Chi-square goodness-of-fit of the sampler against the exact pmf, with tail
// mass grouped so every bin has expected count >= 5.
void check_poisson_gof(double mean, long n_draws, RngStream& rng) {
  const double sd = std::sqrt(mean);
  const long lo = std::max<long>(0, static_cast<long>(mean - 12.0 * sd - 5.0));
  const long hi = static_cast<long>(mean + 12.0 * sd + 20.0);

  std::vector<long> counts(hi - lo + 2, 0);  // last slot = outside range
  for (long d = 0; d < n_draws; ++d) {
    const long k = static_cast<long>(sample_poisson(mean, rng));
    if (k < lo || k > hi)
      ++counts.back();
    else
      ++counts[k - lo];
  }

  std::vector<double> expected(counts.size(), 0.0);
  double covered = 0.0;
  for (long k = lo; k <= hi; ++k) {
    const double p = std::exp(poisson_log_pmf(static_cast<double>(k), mean));
    expected[k - lo] = n_draws * p;
    covered += p;
  }
  expected.back() = n_draws * std::max(1.0 - covered, 0.0);

  // group adjacent small-expectation bins
  std::vector<double> obs_g, exp_g;
  double o_acc = 0.0, e_acc = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    o_acc += counts[i];
    e_acc += expected[i];
    if (e_acc >= 5.0) {
      obs_g.push_back(o_acc);
      exp_g.push_back(e_acc);
      o_acc = e_acc = 0.0;
    }
  }
  if (e_acc > 0.0 && !exp_g.empty()) {
    obs_g.back() += o_acc;
    exp_g.back() += e_acc;
  }

  double stat = 0.0;
  for (std::size_t i = 0; i < obs_g.size(); ++i) {
    const double d = obs_g[i] - exp_g[i];
    stat += d * d / exp_g[i];
  }
  const double df = static_cast<double>(obs_g.size()) - 1.0;
  const double crit = chi2_quantile(df, 3.090232);  // significance 1e-3
  INFO("mean=" << mean << " chi2=" << stat << " df=" << df
               << " crit=" << crit);
  CHECK(stat < crit);
}

}  // namespace

TEST_CASE("philox4x32-10 matches the published known-answer vectors") {
  using detail::philox4x32;
  {
    auto out = philox4x32({0u, 0u, 0u, 0u}, {0u, 0u});
    CHECK(out[0] == 0x6627e8d5u);
    CHECK(out[1] == 0xe169c58du);
    CHECK(out[2] == 0xbc57ac4cu);
    CHECK(out[3] == 0x9b00dbd8u);
  }
  {
    auto out = philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                          {0xffffffffu, 0xffffffffu});
    CHECK(out[0] == 0x408f276du);
    CHECK(out[1] == 0x41c83b0eu);
    CHECK(out[2] == 0xa20bc7c6u);
    CHECK(out[3] == 0x6d5451fdu);
  }
  {
    auto out = philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                          {0xa4093822u, 0x299f31d0u});
    CHECK(out[0] == 0xd16cfe09u);
    CHECK(out[1] == 0x94fdccebu);
    CHECK(out[2] == 0x5001e420u);
    CHECK(out[3] == 0x24126ea1u);
  }
}

TEST_CASE("RngStream is deterministic per (seed, stream) and distinct across streams") {
  RngStream a(42, 7), b(42, 7), c(42, 8), d(43, 7);
  bool same_ab = true, same_ac = true, same_ad = true;
  for (int i = 0; i < 256; ++i) {
    const auto va = a.next_u64();
    same_ab &= (va == b.next_u64());
    same_ac &= (va == c.next_u64());
    same_ad &= (va == d.next_u64());
  }
  CHECK(same_ab);
  CHECK_FALSE(same_ac);
  CHECK_FALSE(same_ad);
}

TEST_CASE("uniform doubles live in [0,1) and (0,1]") {
  RngStream rng(1, 1);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.next_double();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const double v = rng.next_double_pos();
    REQUIRE(v > 0.0);
    REQUIRE(v <= 1.0);
  }
}

TEST_CASE("kl_divergence known values") {
  const std::vector<double> a{1, 2, 3};
  CHECK(kl_divergence(a, a) == 0.0);

  const std::vector<double> u{1.0}, v{2.0};
  CHECK_THAT(kl_divergence(u, v),
             Catch::Matchers::WithinAbs(1.0 - std::log(2.0), 1e-15));

  const std::vector<double> u0{0.0}, v3{3.0};
  CHECK(kl_divergence(u0, v3) == 3.0);
}

TEST_CASE("kl_divergence rejects bad domains") {
  const std::vector<double> u{1.0, 2.0}, v{1.0};
  CHECK_THROWS_AS(kl_divergence(u, v), ValidationError);
  const std::vector<double> vz{1.0, 0.0};
  CHECK_THROWS_AS(kl_divergence(u, vz), ValidationError);
  const std::vector<double> un{1.0, -0.5}, vp{1.0, 1.0};
  CHECK_THROWS_AS(kl_divergence(un, vp), ValidationError);
}

TEST_CASE("kl_divergence is strictly positive off the diagonal") {
  RngStream rng(99, 0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> u(16), v(16);
    for (auto& x : u) x = 5.0 * rng.next_double();
    for (auto& x : v) x = 0.1 + 5.0 * rng.next_double();
    if (u == v) continue;
    CHECK(kl_divergence(u, v) > 0.0);
  }
}

TEST_CASE("kl_divergence is continuous at u_i = 0") {
  const std::vector<double> v{3.0, 0.5, 7.0};
  const std::vector<double> u_eps{1e-12, 1.0, 2.0};
  const std::vector<double> u_zero{0.0, 1.0, 2.0};
  CHECK(std::abs(kl_divergence(u_eps, v) - kl_divergence(u_zero, v)) < 1e-9);
}

TEST_CASE("sample_poisson degenerate and domain cases") {
  RngStream rng(5, 5);
  for (int i = 0; i < 100; ++i) CHECK(sample_poisson(0.0, rng) == 0);
  CHECK_THROWS_AS(sample_poisson(-1.0, rng), ValidationError);
  CHECK_THROWS_AS(sample_poisson(std::nan(""), rng), ValidationError);
  CHECK_THROWS_AS(
      sample_poisson(std::numeric_limits<double>::infinity(), rng),
      ValidationError);
}

TEST_CASE("sample_poisson mean and variance at mean 10") {
  RngStream rng(2024, 1);
  const long n = 100000;
  RunningStat stat;
  for (long i = 0; i < n; ++i)
    stat.add(static_cast<double>(sample_poisson(10.0, rng)));
  CHECK(std::abs(stat.mean() - 10.0) < 3.0 * std::sqrt(10.0 / n));
  CHECK(std::abs(stat.variance() - 10.0) < 0.05 * 10.0);
}

TEST_CASE("sample_poisson goodness of fit across both sampling branches") {
  RngStream rng(7, 3);
  for (double mean : {0.5, 5.0, 50.0, 5000.0})
    check_poisson_gof(mean, 100000, rng);
}

TEST_CASE("sample_poisson_image reproducibility and statistics") {
  {
    Image zero(8, 8, 0.0);
    RngStream rng(1, 2);
    Image out = sample_poisson_image(zero, rng);
    for (double v : out.values) CHECK(v == 0.0);
  }
  {
    Image mean(64, 64, 100.0);
    RngStream r1(11, 4), r2(11, 4);
    const Image a = sample_poisson_image(mean, r1);
    const Image b = sample_poisson_image(mean, r2);
    CHECK(a.values == b.values);
  }
  {
    Image mean(256, 256, 100.0);
    RngStream rng(12, 4);
    const Image img = sample_poisson_image(mean, rng);
    const double avg = kahan_total(img.values) / img.size();
    CHECK(std::abs(avg - 100.0) < 3.0 * std::sqrt(100.0 / img.size()));
  }
}

TEST_CASE("sample_standard_normal statistics and reproducibility") {
  CHECK_THROWS_AS([] {
    RngStream rng(0, 0);
    sample_standard_normal(0, rng);
  }(), ValidationError);

  RngStream r1(3, 9), r2(3, 9);
  CHECK(sample_standard_normal(101, r1) == sample_standard_normal(101, r2));

  RngStream rng(31, 1);
  const auto xs = sample_standard_normal(1000000, rng);
  RunningStat stat;
  for (double x : xs) stat.add(x);
  CHECK(std::abs(stat.mean()) < 3e-3);
  CHECK(std::abs(stat.variance() - 1.0) < 0.01);
}

TEST_CASE("sample_rademacher range, statistics, reproducibility") {
  CHECK_THROWS_AS([] {
    RngStream rng(0, 0);
    sample_rademacher(0, rng);
  }(), ValidationError);

  RngStream r1(4, 9), r2(4, 9);
  CHECK(sample_rademacher(57, r1) == sample_rademacher(57, r2));

  RngStream rng(32, 1);
  const auto xs = sample_rademacher(1000000, rng);
  RunningStat stat;
  for (double x : xs) {
    REQUIRE((x == 1.0 || x == -1.0));
    stat.add(x);
  }
  CHECK(std::abs(stat.mean()) < 3e-3);
}
