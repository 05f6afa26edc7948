#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "emstop/errors.hpp"
#include "emstop/kl.hpp"

namespace emstop {

// One per-iteration record of the data-side quantities.
struct RiskSample {
  long k = 0;
  double d_kl = 0.0;   // D_KL(y, pred_k)
  double paukl = 0.0;
  double pukla = 0.0;
  double rekl = 0.0;
  double pdp = 0.0;    // |d_kl - M/2|
};

// Ground-truth-aware track, present only when the truth is known.
struct OracleSample {
  long k = 0;
  double pe = 0.0;      // D_KL(lambda_true, pred_k)
  double err_kl = 0.0;  // D_KL(x_true, x_k)
  double err_l2 = 0.0;  // ||x_true - x_k||
};

struct RiskCurve {
  std::vector<RiskSample> samples;
  std::vector<OracleSample> oracle;  // empty or aligned with samples

  bool has_oracle() const { return !oracle.empty(); }

  void validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].k != static_cast<long>(i) + 1)
        throw ValidationError("RiskCurve: k must increase from 1");
      const RiskSample& s = samples[i];
      for (double v : {s.d_kl, s.paukl, s.pukla, s.rekl, s.pdp})
        if (!std::isfinite(v))
          throw ValidationError("RiskCurve: non-finite sample");
    }
    if (!oracle.empty() && oracle.size() != samples.size())
      throw ValidationError("RiskCurve: oracle track misaligned");
  }
};

// PE(k) = D_KL(lambda, pred_k).
inline double predictive_error(std::span<const double> lambda_true,
                               std::span<const double> pred) {
  return kl_divergence(lambda_true, pred);
}

struct ReconstructionErrors {
  double err_l2 = 0.0;
  double err_kl = 0.0;
};

inline ReconstructionErrors reconstruction_errors(
    std::span<const double> x_true, std::span<const double> x_k) {
  if (x_true.size() != x_k.size())
    throw ValidationError("reconstruction_errors: length mismatch");
  KahanSum sq;
  for (std::size_t i = 0; i < x_true.size(); ++i) {
    const double d = x_true[i] - x_k[i];
    sq.add(d * d);
  }
  return ReconstructionErrors{std::sqrt(sq.value()),
                              kl_divergence(x_true, x_k)};
}

struct ArgminResult {
  long k = 0;        // iteration index of the earliest global minimum
  double value = 0.0;
  bool reached = true;  // false when the curve is still descending at budget
};

// Earliest global minimum over the computed range (ties break to smaller k).
// A minimum sitting at the final index of a run whose curve is still strictly
// decreasing over the last `patience` steps is reported as not reached.
inline ArgminResult argmin_iteration(std::span<const double> curve,
                                     long k_first = 1, long patience = 50) {
  if (curve.empty())
    throw ValidationError("argmin_iteration: empty curve");
  std::size_t best = 0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    if (curve[i] < curve[best]) best = i;

  ArgminResult r;
  r.k = k_first + static_cast<long>(best);
  r.value = curve[best];
  if (best + 1 == curve.size() && curve.size() > 1) {
    const std::size_t window =
        std::min<std::size_t>(static_cast<std::size_t>(patience),
                              curve.size() - 1);
    bool descending = true;
    for (std::size_t i = curve.size() - window; i < curve.size(); ++i)
      if (!(curve[i] < curve[i - 1])) {
        descending = false;
        break;
      }
    r.reached = !descending;
  }
  return r;
}

struct CurveStat {
  std::vector<double> mean;
  std::vector<double> stddev;  // sample standard deviation across realizations
};

struct AggregatedCurves {
  std::vector<long> k;
  std::size_t n_curves = 0;
  CurveStat d_kl, paukl, pukla, rekl, pdp;
  bool has_oracle = false;
  std::vector<double> spr;    // mean PE across realizations
  std::vector<double> er_kl;  // mean err_KL
  std::vector<double> er_l2;  // mean err_l2
};

// Per-k means and standard deviations across independent realizations.
inline AggregatedCurves aggregate_risks(std::span<const RiskCurve> curves) {
  if (curves.empty())
    throw ValidationError("aggregate_risks: need at least one curve");
  const std::size_t len = curves[0].samples.size();
  const bool oracle = curves[0].has_oracle();
  for (const RiskCurve& c : curves) {
    c.validate();
    if (c.samples.size() != len || c.has_oracle() != oracle)
      throw ValidationError("aggregate_risks: curves must share the k range");
  }

  AggregatedCurves out;
  out.n_curves = curves.size();
  out.has_oracle = oracle;
  out.k.resize(len);
  auto size_stat = [len](CurveStat& s) {
    s.mean.resize(len);
    s.stddev.resize(len);
  };
  size_stat(out.d_kl);
  size_stat(out.paukl);
  size_stat(out.pukla);
  size_stat(out.rekl);
  size_stat(out.pdp);
  if (oracle) {
    out.spr.resize(len);
    out.er_kl.resize(len);
    out.er_l2.resize(len);
  }

  for (std::size_t i = 0; i < len; ++i) {
    out.k[i] = curves[0].samples[i].k;
    RunningStat d_kl, paukl, pukla, rekl, pdp, pe, err_kl, err_l2;
    for (const RiskCurve& c : curves) {
      d_kl.add(c.samples[i].d_kl);
      paukl.add(c.samples[i].paukl);
      pukla.add(c.samples[i].pukla);
      rekl.add(c.samples[i].rekl);
      pdp.add(c.samples[i].pdp);
      if (oracle) {
        pe.add(c.oracle[i].pe);
        err_kl.add(c.oracle[i].err_kl);
        err_l2.add(c.oracle[i].err_l2);
      }
    }
    out.d_kl.mean[i] = d_kl.mean();
    out.d_kl.stddev[i] = d_kl.stddev();
    out.paukl.mean[i] = paukl.mean();
    out.paukl.stddev[i] = paukl.stddev();
    out.pukla.mean[i] = pukla.mean();
    out.pukla.stddev[i] = pukla.stddev();
    out.rekl.mean[i] = rekl.mean();
    out.rekl.stddev[i] = rekl.stddev();
    out.pdp.mean[i] = pdp.mean();
    out.pdp.stddev[i] = pdp.stddev();
    if (oracle) {
      out.spr[i] = pe.mean();
      out.er_kl[i] = err_kl.mean();
      out.er_l2[i] = err_l2.mean();
    }
  }
  return out;
}

}  // namespace emstop
