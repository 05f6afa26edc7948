#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "emstop/em.hpp"
#include "emstop/harness.hpp"
#include "emstop/kl.hpp"
#include "emstop/operators.hpp"
#include "emstop/risk.hpp"
#include "emstop/rng.hpp"

namespace emstop {

// Dense matrix of circular convolution, assembled entry by entry from the
// kernel definition. A second, FFT-free route to the same operator.
inline DenseOperator dense_circular_convolution(const Psf& psf, int w, int h) {
  const std::size_t n = static_cast<std::size_t>(w) * h;
  std::vector<double> a(n * n, 0.0);
  for (int py = 0; py < h; ++py)
    for (int px = 0; px < w; ++px)
      for (int qy = 0; qy < h; ++qy)
        for (int qx = 0; qx < w; ++qx) {
          const int sx = (((psf.center_x + px - qx) % w) + w) % w;
          const int sy = (((psf.center_y + py - qy) % h) + h) % h;
          if (sx < psf.image.width && sy < psf.image.height) {
            const std::size_t row = static_cast<std::size_t>(py) * w + px;
            const std::size_t col = static_cast<std::size_t>(qy) * w + qx;
            a[row * n + col] += psf.image.at(sx, sy);
          }
        }
  return DenseOperator(n, n, std::move(a));
}

struct CheckReport {
  std::string name;
  bool passed = true;
  std::string details;
};

namespace detail {

struct LogSumProbe {
  double m;
  double operator()(std::span<const double> y) const {
    return std::log((kahan_total(y) + 1.0) / m);
  }
  void gradient(std::span<const double> y, std::span<double> g) const {
    const double inv = 1.0 / (kahan_total(y) + 1.0);
    for (auto& v : g) v = inv;
  }
};

inline SteinLemmaResult stein_logsum(double level, std::size_t m, long n,
                                     RngStream& rng) {
  const std::vector<double> lambda(m, level);
  LogSumProbe f{static_cast<double>(m)};
  return stein_lemma_check(
      f,
      [&f](std::span<const double> y, std::span<double> g) { f.gradient(y, g); },
      lambda, n, rng);
}

}  // namespace detail

// Both sides of the Poisson Stein identity for f(y) = log((sum y + 1)/M) at
// lambda = 100*1 (M = 16), then at 16x the level where the bound halves.
inline CheckReport check_stein_lemma(std::uint64_t seed) {
  CheckReport rep{"stein", true, ""};
  std::ostringstream out;
  RngStream rng(seed, 0);
  const std::size_t m = 16;
  const long n = 1000000;
  for (double level : {100.0, 1600.0}) {
    const auto res = detail::stein_logsum(level, m, n, rng);
    const double norm_lambda = level * std::sqrt(static_cast<double>(m));
    double worst = 0.0, worst_tol = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double tol = std::max(3.0 * res.combined_stderr(i),
                                  0.5 / std::sqrt(norm_lambda));
      if (std::abs(res.gap(i)) > tol) rep.passed = false;
      if (std::abs(res.gap(i)) > worst) {
        worst = std::abs(res.gap(i));
        worst_tol = tol;
      }
    }
    out << "lambda=" << level << "*1: max |gap| = " << worst
        << " (tolerance " << worst_tol << ")\n";
  }
  rep.details = out.str();
  return rep;
}

inline CheckReport check_half_m(std::uint64_t seed) {
  CheckReport rep{"half-m", true, ""};
  RngStream rng(seed, 0);
  const std::vector<double> lambda(64, 100.0);
  const auto r = half_m_identity_check(lambda, 100000, rng);
  const double tol = std::max(3.0 * r.standard_error, 0.02 * 64.0);
  rep.passed = std::abs(r.estimate - 32.0) <= tol;
  std::ostringstream out;
  out << "E(sum Y log(Y/lambda)) = " << r.estimate << " vs M/2 = 32"
      << " (tolerance " << tol << ", stderr " << r.standard_error << ")\n";
  rep.details = out.str();
  return rep;
}

inline CheckReport check_adjoint(std::uint64_t seed) {
  CheckReport rep{"adjoint", true, ""};
  RngStream rng(seed, 0);
  double worst_pair = 0.0, worst_oracle = 0.0;

  for (int trial = 0; trial < 10; ++trial) {
    Image raw(8, 8, 0.0);
    for (auto& v : raw.values) v = rng.next_double();
    const Psf psf = normalized_psf(std::move(raw));
    const ConvolutionOperator fft_op(psf, 8, 8);
    const DenseOperator dense = dense_circular_convolution(psf, 8, 8);

    std::vector<double> x(64), y(64);
    for (auto& v : x) v = rng.next_double();
    for (auto& v : y) v = rng.next_double();

    const auto fx = fft_op.apply(x);
    const auto dx = dense.apply(x);
    double scale = 1e-30;
    for (double v : dx) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < fx.size(); ++i)
      worst_oracle = std::max(worst_oracle, std::abs(fx[i] - dx[i]) / scale);

    for (int pair = 0; pair < 10; ++pair) {
      for (auto& v : x) v = 2.0 * rng.next_double() - 1.0;
      for (auto& v : y) v = 2.0 * rng.next_double() - 1.0;
      const double lhs = dot(fft_op.apply(x), y);
      const double rhs = dot(x, fft_op.apply_adjoint(y));
      worst_pair = std::max(worst_pair, std::abs(lhs - rhs) /
                                            std::max({1.0, std::abs(lhs)}));
    }
  }
  rep.passed = worst_oracle <= 1e-10 && worst_pair <= 1e-10;
  std::ostringstream out;
  out << "fft vs dense oracle: max rel err = " << worst_oracle
      << " (tolerance 1e-10)\n"
      << "adjoint identity: max rel err = " << worst_pair
      << " (tolerance 1e-10)\n";
  rep.details = out.str();
  return rep;
}

inline CheckReport check_homogeneity(std::uint64_t seed) {
  CheckReport rep{"homogeneity", true, ""};
  const int size = 16;
  const Psf psf = gaussian_psf(size, size, 2.0);
  auto op = std::make_shared<ConvolutionOperator>(psf, size, size);

  RngStream rng(seed, 0);
  Image mean(size, size, 0.0);
  for (auto& v : mean.values) v = 20.0 + 200.0 * rng.next_double();
  const Image counts = sample_poisson_image(mean, rng);
  const std::vector<double> zero_bg(counts.size(), 0.0);

  EmProblem base = EmProblem::ones_start(op, counts.values, zero_bg);
  std::vector<std::vector<double>> base_x;
  run_trajectory(base, 50, [&](const EmState& s) { base_x.push_back(s.x); });

  EmProblem scaled = base;
  for (double& v : scaled.data) v *= 10.0;
  double worst = 0.0;
  std::size_t idx = 0;
  run_trajectory(scaled, 50, [&](const EmState& s) {
    for (std::size_t j = 0; j < s.x.size(); ++j)
      worst = std::max(worst, std::abs(s.x[j] - 10.0 * base_x[idx][j]) /
                                  (10.0 * base_x[idx][j]));
    ++idx;
  });
  rep.passed = worst <= 1e-10;
  std::ostringstream out;
  out << "R_k(10 y) vs 10 R_k(y), k <= 50: max rel err = " << worst
      << " (tolerance 1e-10)\n";
  rep.details = out.str();
  return rep;
}

inline CheckReport check_lemma5(std::uint64_t seed) {
  CheckReport rep{"lemma5", true, ""};
  ExperimentConfig cfg;
  cfg.width = 32;
  cfg.height = 32;
  // low enough total flux that the out-of-cone plateau starts below M/2
  cfg.flux = 300.0;
  cfg.background_level = 0.0;
  cfg.k_max = 400;
  cfg.seed = seed;

  const std::vector<double> scales{1.0, 10.0, 1000.0};
  const Lemma5Result res = lemma5_demo(cfg, scales, 0.25);

  std::ostringstream out;
  out << "M/2 = " << res.half_m << ", plateau of d_kl at L=1: "
      << res.base_plateau << "\n";
  for (const Lemma5Row& row : res.rows) {
    out << "L=" << row.scale << ": min d_kl = " << row.min_d_kl
        << (row.crossed ? ", crossed M/2 at k=" + std::to_string(row.crossing_k)
                        : ", never crossed M/2")
        << ", scaling residual = " << row.scaling_residual << "\n";
    if (row.scaling_residual > 1e-8) rep.passed = false;
  }
  if (!(res.base_plateau > 0.0)) rep.passed = false;
  // small data satisfy the principle, scaling past M/2 / plateau forbids it
  if (!res.rows.front().crossed) rep.passed = false;
  const Lemma5Row& big = res.rows.back();
  if (big.crossed || !(big.scale * res.base_plateau > res.half_m))
    rep.passed = false;
  rep.details = out.str();
  return rep;
}

}  // namespace emstop
