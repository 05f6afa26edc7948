#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "emstop/errors.hpp"
#include "emstop/image.hpp"

namespace emstop {

namespace detail {

// Philox4x32-10 keyed counter permutation (Salmon et al.). Pure integer
// arithmetic, so the raw stream is bit-identical on every platform.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
           static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
           static_cast<std::uint32_t>(p0)};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

}  // namespace detail

// Counter-based random stream. A (seed, stream_id) pair fully determines the
// output sequence; distinct stream ids give statistically independent
// sequences, so parallel workers each own one stream and never contend.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_(stream_id) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

  std::uint64_t next_u64() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const auto block = detail::philox4x32(
        {static_cast<std::uint32_t>(counter_),
         static_cast<std::uint32_t>(counter_ >> 32),
         static_cast<std::uint32_t>(stream_),
         static_cast<std::uint32_t>(stream_ >> 32)},
        {static_cast<std::uint32_t>(seed_),
         static_cast<std::uint32_t>(seed_ >> 32)});
    ++counter_;
    spare_ = static_cast<std::uint64_t>(block[2]) |
             (static_cast<std::uint64_t>(block[3]) << 32);
    have_spare_ = true;
    return static_cast<std::uint64_t>(block[0]) |
           (static_cast<std::uint64_t>(block[1]) << 32);
  }

  // Uniform on [0, 1) with 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform on (0, 1]; safe under log().
  double next_double_pos() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::uint64_t spare_ = 0;
  bool have_spare_ = false;
};

// Standard normal draws via Box-Muller.
inline std::vector<double> sample_standard_normal(std::size_t n,
                                                  RngStream& rng) {
  if (n == 0)
    throw ValidationError("sample_standard_normal: n must be >= 1");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; i += 2) {
    const double u1 = rng.next_double_pos();
    const double u2 = rng.next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    out[i] = r * std::cos(a);
    if (i + 1 < n) out[i + 1] = r * std::sin(a);
  }
  return out;
}

// Entries are -1 or +1 with equal probability.
inline std::vector<double> sample_rademacher(std::size_t n, RngStream& rng) {
  if (n == 0) throw ValidationError("sample_rademacher: n must be >= 1");
  std::vector<double> out(n);
  for (double& x : out) x = (rng.next_u64() >> 63) ? 1.0 : -1.0;
  return out;
}

namespace detail {

// Sequential-search inversion; exact, efficient for small means.
inline std::uint64_t poisson_inversion(double mean, RngStream& rng) {
  const double u = rng.next_double();
  // beyond the cap the remaining mass is ~1e-300; stop rather than spin
  const std::uint64_t cap =
      static_cast<std::uint64_t>(mean + 60.0 * std::sqrt(mean) + 60.0);
  double p = std::exp(-mean);
  double s = p;
  std::uint64_t k = 0;
  while (u > s && k < cap) {
    ++k;
    p *= mean / static_cast<double>(k);
    s += p;
  }
  return k;
}

// Hormann's transformed rejection (PTRS); exact for mean >= 10, used >= 30.
inline std::uint64_t poisson_ptrs(double mean, RngStream& rng) {
  const double smu = std::sqrt(mean);
  const double log_mean = std::log(mean);
  const double b = 0.931 + 2.53 * smu;
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double v_r = 0.9277 - 3.6224 / (b - 2.0);
  for (;;) {
    const double u = rng.next_double() - 0.5;
    double v = rng.next_double();
    const double us = 0.5 - std::abs(u);
    const double kf = std::floor((2.0 * a / us + b) * u + mean + 0.43);
    if (us >= 0.07 && v <= v_r)
      return static_cast<std::uint64_t>(kf);
    if (kf < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
        -mean + kf * log_mean - std::lgamma(kf + 1.0))
      return static_cast<std::uint64_t>(kf);
  }
}

}  // namespace detail

// Exact Poisson draw; no normal approximation at any mean (large-flux cases
// push per-pixel means past 1e4 where an approximation would bias counts).
inline std::uint64_t sample_poisson(double mean, RngStream& rng) {
  if (!std::isfinite(mean) || mean < 0.0)
    throw ValidationError("sample_poisson: mean must be finite and >= 0");
  if (mean == 0.0) return 0;
  if (mean < 30.0) return detail::poisson_inversion(mean, rng);
  return detail::poisson_ptrs(mean, rng);
}

// Independent per-pixel Poisson draws in row-major order.
inline Image sample_poisson_image(const Image& mean, RngStream& rng) {
  Image out(mean.width, mean.height);
  for (std::size_t i = 0; i < mean.size(); ++i)
    out.values[i] = static_cast<double>(sample_poisson(mean.values[i], rng));
  return out;
}

}  // namespace emstop
