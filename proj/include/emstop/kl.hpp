#pragma once

#include <cmath>
#include <span>

#include "emstop/errors.hpp"

namespace emstop {

// Compensated (Kahan) accumulator. The discrepancy sums run over 10^4..10^5
// pixel terms and feed tolerance checks at 1e-12, so plain summation noise
// would be visible.
class KahanSum {
 public:
  void add(double x) {
    const double t = x - c_;
    const double u = s_ + t;
    c_ = (u - s_) - t;
    s_ = u;
  }
  double value() const { return s_; }

 private:
  double s_ = 0.0;
  double c_ = 0.0;
};

inline double kahan_total(std::span<const double> xs) {
  KahanSum acc;
  for (double x : xs) acc.add(x);
  return acc.value();
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  KahanSum acc;
  for (std::size_t i = 0; i < a.size(); ++i) acc.add(a[i] * b[i]);
  return acc.value();
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

// Streaming mean and sample variance (Welford).
class RunningStat {
 public:
  void add(double x) {
    ++n_;
    const double d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d * (x - mean_);
  }
  long count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const {
    return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0;
  }
  double stddev() const { return std::sqrt(variance()); }
  double standard_error() const {
    return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0;
  }

 private:
  long n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

// D_KL(u, v) = sum_i u_i log(u_i / v_i) + v_i - u_i, with 0 log 0 = 0.
// Requires u >= 0 and v > 0 component-wise; each term is nonnegative and the
// sum vanishes iff u == v.
inline double kl_divergence(std::span<const double> u,
                            std::span<const double> v) {
  if (u.size() != v.size())
    throw ValidationError("kl_divergence: length mismatch");
  KahanSum acc;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!(v[i] > 0.0))
      throw ValidationError("kl_divergence: second argument must be > 0");
    if (!(u[i] >= 0.0))
      throw ValidationError("kl_divergence: first argument must be >= 0");
    double term = v[i] - u[i];
    if (u[i] > 0.0) term += u[i] * std::log(u[i] / v[i]);
    acc.add(term);
  }
  return acc.value();
}

}  // namespace emstop
