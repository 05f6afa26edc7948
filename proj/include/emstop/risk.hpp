#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "emstop/errors.hpp"
#include "emstop/kl.hpp"
#include "emstop/rng.hpp"

namespace emstop {

namespace detail {

inline void require_lengths(std::size_t m, std::initializer_list<std::size_t> ls,
                            const char* who) {
  for (std::size_t l : ls)
    if (l != m) throw ValidationError(std::string(who) + ": length mismatch");
}

inline double checked_log_pred(double lp, const char* who) {
  if (!std::isfinite(lp))
    throw NumericalError(std::string(who) + ": non-finite log prediction");
  return lp;
}

// D_KL(y, exp(log_pred)) evaluated directly from the log-prediction.
inline double kl_from_log_pred(std::span<const double> y,
                               std::span<const double> log_pred,
                               const char* who) {
  KahanSum acc;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double lp = checked_log_pred(log_pred[i], who);
    double term = std::exp(lp) - y[i];
    if (y[i] > 0.0) term += y[i] * (std::log(y[i]) - lp);
    acc.add(term);
  }
  return acc.value();
}

// Monte-Carlo divergence term: sum_i y_i p_i (log_pred_probe_i - log_pred_i)/eps.
inline double probe_divergence_term(std::span<const double> y,
                                    std::span<const double> log_pred,
                                    std::span<const double> log_pred_probe,
                                    std::span<const double> probe,
                                    double epsilon, const char* who) {
  KahanSum acc;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = checked_log_pred(log_pred_probe[i], who) -
                     checked_log_pred(log_pred[i], who);
    acc.add(y[i] * probe[i] * (d / epsilon));
  }
  return acc.value();
}

}  // namespace detail

// Asymptotically unbiased KL risk estimate:
//   D_KL(y, pred) + sum_i y_i eta_i (log pred(y+eps*eta)_i - log pred(y)_i)/eps - M/2.
// Unlike PUKLA and REKL this carries no unknown additive constant.
inline double paukl(std::span<const double> y, std::span<const double> log_pred,
                    std::span<const double> log_pred_eta,
                    std::span<const double> eta, double epsilon,
                    std::size_t m) {
  if (!(epsilon > 0.0)) throw ValidationError("paukl: epsilon must be > 0");
  detail::require_lengths(
      m, {y.size(), log_pred.size(), log_pred_eta.size(), eta.size()}, "paukl");
  const double d_kl = detail::kl_from_log_pred(y, log_pred, "paukl");
  const double div = detail::probe_divergence_term(y, log_pred, log_pred_eta,
                                                   eta, epsilon, "paukl");
  return d_kl + div - 0.5 * static_cast<double>(m);
}

// Two-reconstruction approximation of the PUKLA estimator:
//   ||pred||_1 - [ y . log pred - sum_i y_i zeta_i (log pred(y+eps*zeta)_i - log pred(y)_i)/eps ].
// Estimates the risk up to an additive constant only.
inline double pukla_approx(std::span<const double> y,
                           std::span<const double> log_pred,
                           std::span<const double> log_pred_zeta,
                           std::span<const double> zeta, double epsilon) {
  if (!(epsilon > 0.0))
    throw ValidationError("pukla_approx: epsilon must be > 0");
  detail::require_lengths(
      y.size(), {log_pred.size(), log_pred_zeta.size(), zeta.size()},
      "pukla_approx");
  KahanSum l1;
  KahanSum fit;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double lp = detail::checked_log_pred(log_pred[i], "pukla_approx");
    l1.add(std::exp(lp));
    fit.add(y[i] * lp);
  }
  const double correction = detail::probe_divergence_term(
      y, log_pred, log_pred_zeta, zeta, epsilon, "pukla_approx");
  return l1.value() - (fit.value() - correction);
}

// Centered-difference risk estimate:
//   sum_i pred_i - y_i log pred_i
//        + M y_i eta_i / (2 eps ||eta||^2) * (log pred(y+eps*eta)_i - log pred(y-eps*eta)_i).
// Also defined only up to an additive constant.
inline double rekl(std::span<const double> y, std::span<const double> pred,
                   std::span<const double> log_pred_plus,
                   std::span<const double> log_pred_minus,
                   std::span<const double> eta, double epsilon,
                   std::size_t m) {
  if (!(epsilon > 0.0)) throw ValidationError("rekl: epsilon must be > 0");
  detail::require_lengths(m,
                          {y.size(), pred.size(), log_pred_plus.size(),
                           log_pred_minus.size(), eta.size()},
                          "rekl");
  const double eta_sq = squared_norm(eta);
  if (!(eta_sq > 0.0)) throw ValidationError("rekl: probe must be nonzero");
  const double scale = static_cast<double>(m) / (2.0 * epsilon * eta_sq);
  KahanSum acc;
  for (std::size_t i = 0; i < m; ++i) {
    if (!(pred[i] > 0.0))
      throw NumericalError("rekl: prediction must be > 0");
    const double diff = detail::checked_log_pred(log_pred_plus[i], "rekl") -
                        detail::checked_log_pred(log_pred_minus[i], "rekl");
    acc.add(pred[i] - y[i] * std::log(pred[i]) +
            scale * y[i] * eta[i] * diff);
  }
  return acc.value();
}

struct PdpResult {
  bool satisfied = false;  // d_kl < M/2
  double pdp = 0.0;        // |d_kl - M/2|
};

inline PdpResult poisson_discrepancy(double d_kl, std::size_t m) {
  if (!(d_kl >= 0.0))
    throw ValidationError("poisson_discrepancy: d_kl must be >= 0");
  if (m < 1) throw ValidationError("poisson_discrepancy: M must be >= 1");
  const double half_m = 0.5 * static_cast<double>(m);
  return PdpResult{d_kl < half_m, std::abs(d_kl - half_m)};
}

// Empirical two-sided check of E((Y_i - l_i) f(Y)) = E(Y_i d_i f(Y)) + O(||l||^{-1/2}).
struct SteinLemmaResult {
  std::vector<double> lhs, lhs_stderr;
  std::vector<double> rhs, rhs_stderr;

  double gap(std::size_t i) const { return lhs[i] - rhs[i]; }
  double combined_stderr(std::size_t i) const {
    return std::sqrt(lhs_stderr[i] * lhs_stderr[i] +
                     rhs_stderr[i] * rhs_stderr[i]);
  }
  double max_abs_gap() const {
    double g = 0.0;
    for (std::size_t i = 0; i < lhs.size(); ++i)
      g = std::max(g, std::abs(gap(i)));
    return g;
  }
};

// f: span<const double> -> double; grad: (span<const double> y, span<double> out).
// The left side is accumulated as (y_i - l_i)(f(y) - f(l)); subtracting the
// exactly-mean-zero f(l)(Y_i - l_i) leaves the estimate unbiased and strips
// the dominant variance term.
template <typename F, typename Grad>
SteinLemmaResult stein_lemma_check(F&& f, Grad&& grad,
                                   std::span<const double> lambda,
                                   long n_draws, RngStream& rng) {
  if (n_draws < 1)
    throw ValidationError("stein_lemma_check: n_draws must be >= 1");
  require_positive(lambda, "stein_lemma_check lambda");
  const std::size_t m = lambda.size();

  const double f_lambda = f(lambda);
  std::vector<RunningStat> lhs(m), rhs(m);
  std::vector<double> y(m), g(m);
  for (long d = 0; d < n_draws; ++d) {
    for (std::size_t i = 0; i < m; ++i)
      y[i] = static_cast<double>(sample_poisson(lambda[i], rng));
    const double fy = f(std::span<const double>(y));
    grad(std::span<const double>(y), std::span<double>(g));
    for (std::size_t i = 0; i < m; ++i) {
      lhs[i].add((y[i] - lambda[i]) * (fy - f_lambda));
      rhs[i].add(y[i] * g[i]);
    }
  }

  SteinLemmaResult out;
  out.lhs.resize(m);
  out.lhs_stderr.resize(m);
  out.rhs.resize(m);
  out.rhs_stderr.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    out.lhs[i] = lhs[i].mean();
    out.lhs_stderr[i] = lhs[i].standard_error();
    out.rhs[i] = rhs[i].mean();
    out.rhs_stderr[i] = rhs[i].standard_error();
  }
  return out;
}

struct HalfMResult {
  double estimate = 0.0;
  double standard_error = 0.0;
};

// Estimates E(sum_i Y_i log(Y_i / l_i)), which approaches M/2 as the counts
// grow. Accumulated as D_KL(Y, l) = sum Y log(Y/l) + l - Y; the appended
// l - Y has exact mean zero and removes the linear variance term.
inline HalfMResult half_m_identity_check(std::span<const double> lambda,
                                         long n_draws, RngStream& rng) {
  if (n_draws < 1)
    throw ValidationError("half_m_identity_check: n_draws must be >= 1");
  require_positive(lambda, "half_m_identity_check lambda");
  RunningStat stat;
  std::vector<double> y(lambda.size());
  for (long d = 0; d < n_draws; ++d) {
    for (std::size_t i = 0; i < lambda.size(); ++i)
      y[i] = static_cast<double>(sample_poisson(lambda[i], rng));
    stat.add(kl_divergence(y, lambda));
  }
  return HalfMResult{stat.mean(), stat.standard_error()};
}

}  // namespace emstop
