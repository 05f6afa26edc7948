#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "emstop/em.hpp"
#include "emstop/errors.hpp"
#include "emstop/formats.hpp"
#include "emstop/kl.hpp"
#include "emstop/metrics.hpp"
#include "emstop/operators.hpp"
#include "emstop/risk.hpp"
#include "emstop/rng.hpp"

namespace emstop {

enum class ExperimentMode { inverse_crime, mismatched_psf };

inline std::string to_string(ExperimentMode m) {
  return m == ExperimentMode::inverse_crime ? "inverse_crime"
                                            : "mismatched_psf";
}

inline ExperimentMode parse_mode(const std::string& s) {
  if (s == "inverse_crime") return ExperimentMode::inverse_crime;
  if (s == "mismatched_psf") return ExperimentMode::mismatched_psf;
  throw ValidationError("unknown mode: " + s);
}

struct ExperimentConfig {
  int width = 64;
  int height = 64;
  std::string phantom = "synthetic";  // "synthetic" or a path to an image file
  double psf_sigma = 3.0;
  double flux = 625000.0;           // total counts of the rescaled object
  double background_level = 100.0;  // constant background per pixel
  int n_realizations = 25;
  long k_max = 2000;
  double epsilon = 1e-3;
  std::uint64_t seed = 0;
  ExperimentMode mode = ExperimentMode::inverse_crime;
  double psf_noise_scale = 1e4;   // mismatched mode only
  bool rekl_shares_probe = false; // share the PAUKL probe with the REKL pair
  long patience = 50;             // window for the minimum-reached rule

  void validate() const {
    if (width < 4 || height < 4)
      throw ValidationError("config: width/height must be >= 4");
    if (!(psf_sigma > 0.0)) throw ValidationError("config: psf_sigma must be > 0");
    if (!(flux > 0.0)) throw ValidationError("config: flux must be > 0");
    if (!(background_level >= 0.0))
      throw ValidationError("config: background_level must be >= 0");
    if (n_realizations < 1)
      throw ValidationError("config: n_realizations must be >= 1");
    if (k_max < 1) throw ValidationError("config: k_max must be >= 1");
    if (!(epsilon > 0.0)) throw ValidationError("config: epsilon must be > 0");
    if (mode == ExperimentMode::mismatched_psf && !(psf_noise_scale > 0.0))
      throw ValidationError("config: psf_noise_scale must be > 0");
    if (patience < 1) throw ValidationError("config: patience must be >= 1");
  }
};

// Stream-id allocation: the exact-PSF noise is a property of the simulated
// instrument (one draw per experiment), every realization then owns a data
// stream and a probe stream. Trials never share streams, so adding or
// removing one cannot disturb another.
namespace stream_ids {
constexpr std::uint64_t exact_psf = 0;
inline std::uint64_t trial_data(int realization) {
  return (static_cast<std::uint64_t>(realization) << 4) | 1u;
}
inline std::uint64_t trial_probes(int realization) {
  return (static_cast<std::uint64_t>(realization) << 4) | 2u;
}
}  // namespace stream_ids

// A few Gaussian blobs plus a point source on a dark field. Shapes scale
// with the grid so per-pixel statistics stay comparable across sizes.
inline Image synthetic_phantom(int width, int height) {
  Image img(width, height, 0.0);
  const double m = std::min(width, height);
  struct Blob {
    double cx, cy, sigma, amp;
  };
  constexpr Blob blobs[] = {
      {0.36, 0.42, 0.1275, 1.0},
      {0.62, 0.58, 0.1950, 0.55},
      {0.50, 0.70, 0.0675, 0.9},
  };
  for (const Blob& b : blobs) {
    const double s = b.sigma * m;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double dx = x - b.cx * width;
        const double dy = y - b.cy * height;
        img.at(x, y) += b.amp * std::exp(-(dx * dx + dy * dy) / (2 * s * s));
      }
  }
  // point source bright enough to matter, small enough that its slow
  // sharpening does not dominate the l2 error curve
  const int px = static_cast<int>(std::lround(0.72 * width));
  const int py = static_cast<int>(std::lround(0.28 * height));
  img.at(px, py) += 4.0 * (m / 64.0) * (m / 64.0);
  return img;
}

inline Image rescale_to_flux(Image img, double flux) {
  require_nonnegative(img.values, "phantom");
  const double total = kahan_total(img.values);
  if (!(total > 0.0)) throw ValidationError("phantom has zero total flux");
  const double factor = flux / total;
  for (double& v : img.values) v *= factor;
  return img;
}

struct SimulatedData {
  Image x_true;                      // rescaled object
  Image y;                           // Poisson counts
  std::vector<double> lambda_true;   // generator prediction H_gen x* + b
  std::vector<double> background;    // constant b
  Psf recon_psf;                     // smooth PSF used for reconstruction
  std::optional<Psf> exact_psf;      // generator PSF (mismatched mode only)
  std::shared_ptr<const ForwardOperator> recon_op;
};

// Builds one data realization. The reconstruction operator always carries the
// smooth Gaussian PSF; in mismatched mode the data are generated through a
// count-noise PSF drawn once per experiment from its own stream.
inline SimulatedData simulate_data(const ExperimentConfig& cfg,
                                   RngStream& data_rng) {
  cfg.validate();
  SimulatedData sim;

  Image phantom = cfg.phantom == "synthetic"
                      ? synthetic_phantom(cfg.width, cfg.height)
                      : load_image(cfg.phantom);
  if (phantom.width != cfg.width || phantom.height != cfg.height)
    throw ValidationError("phantom dimensions do not match the config");
  sim.x_true = rescale_to_flux(std::move(phantom), cfg.flux);

  sim.recon_psf = gaussian_psf(cfg.width, cfg.height, cfg.psf_sigma);
  sim.recon_op = std::make_shared<ConvolutionOperator>(sim.recon_psf,
                                                       cfg.width, cfg.height);

  std::shared_ptr<const ForwardOperator> gen_op = sim.recon_op;
  if (cfg.mode == ExperimentMode::mismatched_psf) {
    RngStream psf_rng(cfg.seed, stream_ids::exact_psf);
    sim.exact_psf = count_noise_psf(sim.recon_psf, cfg.psf_noise_scale, psf_rng);
    gen_op = std::make_shared<ConvolutionOperator>(*sim.exact_psf, cfg.width,
                                                   cfg.height);
  }

  sim.background.assign(gen_op->output_size(), cfg.background_level);
  sim.lambda_true = gen_op->apply(sim.x_true.values);
  for (std::size_t i = 0; i < sim.lambda_true.size(); ++i) {
    sim.lambda_true[i] += sim.background[i];
    // FFT roundoff can leave -1e-18 where the exact value is 0
    if (sim.lambda_true[i] < 0.0) sim.lambda_true[i] = 0.0;
  }

  Image mean(cfg.width, cfg.height);
  mean.values = sim.lambda_true;
  sim.y = sample_poisson_image(mean, data_rng);
  return sim;
}

// Stopping decisions of one realization, one per rule.
struct TrialReport {
  int realization = 0;
  bool failed = false;
  std::string failure;
  ArgminResult pe, paukl, pukla, rekl, pdp, err_kl, err_l2;
  bool pdp_satisfied = false;  // d_kl dropped below M/2 at some iteration
  long pdp_first_k = 0;        // first such iteration (0 = never)
};

inline constexpr std::array<const char*, 7> kRuleNames = {
    "PE", "PAUKL", "PUKLA", "REKL", "PDP", "err_KL", "err_l2"};

inline std::array<const ArgminResult*, 7> rule_decisions(
    const TrialReport& r) {
  return {&r.pe,  &r.paukl,  &r.pukla, &r.rekl,
          &r.pdp, &r.err_kl, &r.err_l2};
}

struct TrialResult {
  RiskCurve curve;
  TrialReport report;
};

// Simulates one realization, runs the coupled trajectories to k_max, records
// every risk sample and oracle metric, and extracts the stopping iteration of
// each rule. EM numerical failures mark the trial failed instead of
// propagating, so a sweep can continue.
inline TrialResult run_trial(const ExperimentConfig& cfg, int realization) {
  cfg.validate();
  TrialResult out;
  out.report.realization = realization;

  RngStream data_rng(cfg.seed, stream_ids::trial_data(realization));
  SimulatedData sim = simulate_data(cfg, data_rng);

  EmProblem problem =
      EmProblem::ones_start(sim.recon_op, sim.y.values, sim.background);
  const std::size_t m = problem.data.size();

  CoupledOptions opt;
  opt.epsilon = cfg.epsilon;
  opt.rekl_shares_probe = cfg.rekl_shares_probe;

  RiskCurve& curve = out.curve;
  curve.samples.reserve(cfg.k_max);
  curve.oracle.reserve(cfg.k_max);

  RngStream probe_rng(cfg.seed, stream_ids::trial_probes(realization));
  try {
    run_coupled(problem, cfg.k_max, opt, probe_rng, [&](const CoupledView& v) {
      RiskSample s;
      s.k = v.k;
      s.d_kl = kl_divergence(v.data, v.pred);
      s.paukl =
          paukl(v.data, v.log_pred, v.log_pred_eta, v.probes->eta, v.epsilon, m);
      s.pukla = pukla_approx(v.data, v.log_pred, v.log_pred_zeta,
                             v.probes->zeta, v.epsilon);
      const std::span<const double> rekl_probe =
          opt.rekl_shares_probe ? std::span<const double>(v.probes->eta)
                                : std::span<const double>(v.probes->rekl_eta);
      s.rekl = rekl(v.data, v.pred, v.log_pred_rekl_plus, v.log_pred_rekl_minus,
                    rekl_probe, v.epsilon, m);
      s.pdp = poisson_discrepancy(s.d_kl, m).pdp;
      curve.samples.push_back(s);

      OracleSample o;
      o.k = v.k;
      o.pe = predictive_error(sim.lambda_true, v.pred);
      const auto errs = reconstruction_errors(sim.x_true.values, v.x);
      o.err_kl = errs.err_kl;
      o.err_l2 = errs.err_l2;
      curve.oracle.push_back(o);
    });
  } catch (const NumericalError& e) {
    out.report.failed = true;
    out.report.failure = e.what();
    out.curve = RiskCurve{};
    return out;
  }

  auto track = [&](auto proj) {
    std::vector<double> v;
    v.reserve(curve.samples.size());
    for (std::size_t i = 0; i < curve.samples.size(); ++i) v.push_back(proj(i));
    return v;
  };
  TrialReport& rep = out.report;
  rep.pe = argmin_iteration(track([&](std::size_t i) { return curve.oracle[i].pe; }),
                            1, cfg.patience);
  rep.paukl = argmin_iteration(
      track([&](std::size_t i) { return curve.samples[i].paukl; }), 1,
      cfg.patience);
  rep.pukla = argmin_iteration(
      track([&](std::size_t i) { return curve.samples[i].pukla; }), 1,
      cfg.patience);
  rep.rekl = argmin_iteration(
      track([&](std::size_t i) { return curve.samples[i].rekl; }), 1,
      cfg.patience);
  rep.pdp = argmin_iteration(
      track([&](std::size_t i) { return curve.samples[i].pdp; }), 1,
      cfg.patience);
  rep.err_kl = argmin_iteration(
      track([&](std::size_t i) { return curve.oracle[i].err_kl; }), 1,
      cfg.patience);
  rep.err_l2 = argmin_iteration(
      track([&](std::size_t i) { return curve.oracle[i].err_l2; }), 1,
      cfg.patience);

  const double half_m = 0.5 * static_cast<double>(m);
  for (const RiskSample& s : curve.samples)
    if (s.d_kl < half_m) {
      rep.pdp_satisfied = true;
      rep.pdp_first_k = s.k;
      break;
    }
  return out;
}

struct SweepSummaryRow {
  std::string rule;
  double mean_k = 0.0;  // over trials that reached a minimum
  double std_k = 0.0;
  int n_failed = 0;     // trials excluded: EM failure or minimum not reached
};

struct SweepResult {
  std::vector<TrialResult> trials;  // indexed by realization
  AggregatedCurves aggregate;       // over successful trials
  std::vector<SweepSummaryRow> summary;
  int n_failed = 0;  // trials that failed numerically
};

// Runs n independent realizations on their own streams (optionally on a
// worker pool) and aggregates. Results are identical at any worker count:
// trial i writes only slot i and the reduction runs in index order.
inline SweepResult run_sweep(const ExperimentConfig& cfg, int workers = 1) {
  cfg.validate();
  if (workers < 1) throw ValidationError("run_sweep: workers must be >= 1");

  SweepResult out;
  out.trials.resize(cfg.n_realizations);

  const int n_workers = std::min<int>(workers, cfg.n_realizations);
  if (n_workers == 1) {
    for (int i = 0; i < cfg.n_realizations; ++i)
      out.trials[i] = run_trial(cfg, i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (int w = 0; w < n_workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          const int i = next.fetch_add(1);
          if (i >= cfg.n_realizations) return;
          out.trials[i] = run_trial(cfg, i);
        }
      });
    for (std::thread& t : pool) t.join();
  }

  std::vector<RiskCurve> ok;
  for (const TrialResult& t : out.trials) {
    if (t.report.failed)
      ++out.n_failed;
    else
      ok.push_back(t.curve);
  }
  if (ok.empty()) throw NumericalError("run_sweep: every trial failed");
  out.aggregate = aggregate_risks(ok);

  for (std::size_t r = 0; r < kRuleNames.size(); ++r) {
    SweepSummaryRow row;
    row.rule = kRuleNames[r];
    RunningStat stat;
    for (const TrialResult& t : out.trials) {
      if (t.report.failed) {
        ++row.n_failed;
        continue;
      }
      const ArgminResult& d = *rule_decisions(t.report)[r];
      if (!d.reached) {
        ++row.n_failed;
        continue;
      }
      stat.add(static_cast<double>(d.k));
    }
    row.mean_k = stat.count() > 0 ? stat.mean()
                                  : std::numeric_limits<double>::quiet_NaN();
    row.std_k = stat.count() > 0 ? stat.stddev()
                                 : std::numeric_limits<double>::quiet_NaN();
    out.summary.push_back(std::move(row));
  }
  return out;
}

struct Lemma5Row {
  double scale = 1.0;   // L
  double min_d_kl = 0.0;
  long crossing_k = 0;  // first k with d_kl < M/2 (0 = never)
  bool crossed = false;
  double scaling_residual = 0.0;  // vs L * d_kl of the base run
};

struct Lemma5Result {
  double half_m = 0.0;
  double base_plateau = 0.0;  // d_kl of the base run at k_max
  std::vector<Lemma5Row> rows;
};

// Background-free discrepancy-failure demo. The base data are a blurred
// object plus (optionally) a one-pixel spike carrying `spike_fraction` of the
// total flux; the spike cannot be represented by nonnegative objects through
// a smooth kernel, so the discrepancy plateaus above zero and scaling the
// data by a large enough L keeps it above M/2 forever.
inline Lemma5Result lemma5_demo(const ExperimentConfig& cfg,
                                std::span<const double> scales,
                                double spike_fraction = 0.25) {
  cfg.validate();
  if (cfg.background_level != 0.0)
    throw ValidationError("lemma5_demo: background must be 0");
  if (!(spike_fraction >= 0.0))
    throw ValidationError("lemma5_demo: spike_fraction must be >= 0");

  const Psf psf = gaussian_psf(cfg.width, cfg.height, cfg.psf_sigma);
  auto op =
      std::make_shared<ConvolutionOperator>(psf, cfg.width, cfg.height);

  Image x_true =
      rescale_to_flux(synthetic_phantom(cfg.width, cfg.height), cfg.flux);
  std::vector<double> y = op->apply(x_true.values);
  for (double& v : y) v = std::max(v, 0.0);
  if (spike_fraction > 0.0) {
    const std::size_t center =
        (static_cast<std::size_t>(cfg.height) / 2) * cfg.width + cfg.width / 2;
    y[center] += spike_fraction * kahan_total(y);
  }

  const std::size_t m = op->output_size();
  const double half_m = 0.5 * static_cast<double>(m);
  const std::vector<double> zero_bg(m, 0.0);

  auto run_curve = [&](const std::vector<double>& data) {
    std::vector<double> d_kl;
    d_kl.reserve(cfg.k_max);
    EmProblem p = EmProblem::ones_start(op, data, zero_bg);
    run_trajectory(p, cfg.k_max, [&](const EmState& s) {
      d_kl.push_back(kl_divergence(p.data, s.prediction));
    });
    return d_kl;
  };

  const std::vector<double> base = run_curve(y);

  Lemma5Result out;
  out.half_m = half_m;
  out.base_plateau = base.back();
  for (double scale : scales) {
    if (!(scale > 0.0))
      throw ValidationError("lemma5_demo: scales must be > 0");
    std::vector<double> scaled_y(y);
    for (double& v : scaled_y) v *= scale;
    const std::vector<double> curve = run_curve(scaled_y);

    Lemma5Row row;
    row.scale = scale;
    row.min_d_kl = curve[0];
    for (std::size_t i = 0; i < curve.size(); ++i) {
      row.min_d_kl = std::min(row.min_d_kl, curve[i]);
      if (!row.crossed && curve[i] < half_m) {
        row.crossed = true;
        row.crossing_k = static_cast<long>(i) + 1;
      }
      const double want = scale * base[i];
      row.scaling_residual =
          std::max(row.scaling_residual, std::abs(curve[i] - want) /
                                             std::max(want, 1e-300));
    }
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace emstop
