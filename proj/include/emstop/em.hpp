#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emstop/errors.hpp"
#include "emstop/kl.hpp"
#include "emstop/operators.hpp"
#include "emstop/rng.hpp"

namespace emstop {

// Poisson ML problem y = Hx + b with nonnegative data and a strictly
// positive starting point.
struct EmProblem {
  std::shared_ptr<const ForwardOperator> op;
  std::vector<double> data;        // y >= 0, length = op->output_size()
  std::vector<double> background;  // b >= 0, same length
  std::vector<double> initial;     // x0 > 0, length = op->input_size()

  void validate() const {
    if (!op) throw ValidationError("EmProblem: operator is null");
    if (data.size() != op->output_size() ||
        background.size() != op->output_size() ||
        initial.size() != op->input_size())
      throw ValidationError("EmProblem: dimension mismatch");
    require_nonnegative(data, "EmProblem data");
    require_nonnegative(background, "EmProblem background");
    require_positive(initial, "EmProblem initial");
  }

  static EmProblem ones_start(std::shared_ptr<const ForwardOperator> op,
                              std::vector<double> data,
                              std::vector<double> background) {
    EmProblem p;
    p.initial.assign(op->input_size(), 1.0);
    p.op = std::move(op);
    p.data = std::move(data);
    p.background = std::move(background);
    p.validate();
    return p;
  }
};

struct EmState {
  long k = 0;
  std::vector<double> x;           // strictly positive iterate
  std::vector<double> prediction;  // Hx + b, strictly positive
  bool underflow_floored = false;  // some pixel hit the positivity floor
};

namespace detail {

// Keeps iterates strictly positive when a pixel rounds down to zero (or to a
// tiny negative through FFT noise on an exact zero).
constexpr double kPositivityFloor = 1e-300;

inline void refresh_prediction(const EmProblem& p, EmState& s) {
  p.op->apply(s.x, s.prediction);
  for (std::size_t i = 0; i < s.prediction.size(); ++i) {
    s.prediction[i] += p.background[i];
    if (!(s.prediction[i] > 0.0))
      throw NumericalError("EM: singular prediction (Hx+b <= 0) at iteration " +
                           std::to_string(s.k));
    if (!std::isfinite(s.prediction[i]))
      throw NumericalError("EM: non-finite prediction at iteration " +
                           std::to_string(s.k));
  }
}

}  // namespace detail

inline EmState initial_state(const EmProblem& p) {
  EmState s;
  s.x = p.initial;
  s.prediction.resize(p.op->output_size());
  detail::refresh_prediction(p, s);
  return s;
}

struct EmWorkspace {
  std::vector<double> ratio;
  std::vector<double> back;
};

// One multiplicative update x <- (x / H^T 1) * H^T(y / (Hx + b)).
inline void em_advance(const EmProblem& p, EmState& s, EmWorkspace& w) {
  const std::size_t m = p.op->output_size();
  const std::size_t n = p.op->input_size();
  w.ratio.resize(m);
  w.back.resize(n);
  for (std::size_t i = 0; i < m; ++i) w.ratio[i] = p.data[i] / s.prediction[i];
  p.op->apply_adjoint(w.ratio, w.back);
  const auto colsum = p.op->column_sums();
  bool floored = false;
  for (std::size_t j = 0; j < n; ++j) {
    double v = s.x[j] * (w.back[j] / colsum[j]);
    if (!std::isfinite(v))
      throw NumericalError("EM: non-finite iterate at iteration " +
                           std::to_string(s.k + 1));
    if (v <= 0.0) {
      v = detail::kPositivityFloor;
      floored = true;
    }
    s.x[j] = v;
  }
  ++s.k;
  s.underflow_floored |= floored;
  detail::refresh_prediction(p, s);
}

// Pure single-step form.
inline EmState em_step(const EmProblem& p, const EmState& state) {
  EmState s = state;
  EmWorkspace w;
  em_advance(p, s, w);
  return s;
}

// Runs k_max steps, invoking the observer after each with the fresh state.
template <typename Observer>
EmState run_trajectory(const EmProblem& p, long k_max, Observer&& observer) {
  if (k_max < 0) throw ValidationError("run_trajectory: k_max must be >= 0");
  p.validate();
  EmState s = initial_state(p);
  EmWorkspace w;
  for (long k = 1; k <= k_max; ++k) {
    em_advance(p, s, w);
    observer(s);
  }
  return s;
}

inline EmState run_trajectory(const EmProblem& p, long k_max) {
  return run_trajectory(p, k_max, [](const EmState&) {});
}

// Which perturbed replicas accompany the main trajectory. The PAUKL probe
// eta is always drawn; the REKL pair can either share it or use its own.
struct CoupledOptions {
  double epsilon = 1e-3;
  bool with_pukla = true;
  bool with_rekl = true;
  bool rekl_shares_probe = false;
};

struct CoupledProbes {
  std::vector<double> eta;       // normal probe for the divergence term
  std::vector<double> zeta;      // +-1 probe (empty when PUKLA disabled)
  std::vector<double> rekl_eta;  // normal probe (empty when shared/disabled)
};

// Everything an observer needs to assemble the per-iteration risk record:
// iterates of the main run plus log-predictions of every replica at the same k.
struct CoupledView {
  long k = 0;
  std::span<const double> data;
  std::span<const double> x;
  std::span<const double> pred;
  std::span<const double> log_pred;
  std::span<const double> log_pred_eta;
  std::span<const double> log_pred_zeta;        // empty when disabled
  std::span<const double> log_pred_rekl_plus;   // empty when REKL disabled
  std::span<const double> log_pred_rekl_minus;  // empty when REKL disabled
  const CoupledProbes* probes = nullptr;
  double epsilon = 0.0;
};

struct CoupledTrajectories {
  EmState main;
  EmState perturbed_eta;
  std::optional<EmState> perturbed_zeta;
  std::optional<EmState> rekl_plus;  // absent when sharing the eta replica
  std::optional<EmState> rekl_minus;
  CoupledProbes probes;
  double epsilon = 0.0;
};

namespace detail {

struct CoupledLane {
  EmProblem problem;
  EmState state;
  EmWorkspace workspace;
  std::vector<double> log_pred;

  void advance() { em_advance(problem, state, workspace); }

  void refresh_log() {
    log_pred.resize(state.prediction.size());
    for (std::size_t i = 0; i < state.prediction.size(); ++i)
      log_pred[i] = std::log(state.prediction[i]);
  }
};

inline EmProblem perturbed_problem(const EmProblem& base, double epsilon,
                                   std::span<const double> probe, double sign) {
  EmProblem p = base;
  for (std::size_t i = 0; i < p.data.size(); ++i)
    p.data[i] = std::max(p.data[i] + sign * epsilon * probe[i], 0.0);
  return p;
}

}  // namespace detail

// Advances the main trajectory and its perturbed replicas in lockstep; the
// probes are drawn once up front and held fixed for the whole run, so each
// iteration's risk value is a consistent function of one probe realization.
template <typename Observer>
CoupledTrajectories run_coupled_with_probes(const EmProblem& problem,
                                            long k_max,
                                            const CoupledOptions& options,
                                            CoupledProbes probes,
                                            Observer&& observer) {
  if (k_max < 0) throw ValidationError("run_coupled: k_max must be >= 0");
  if (!(options.epsilon > 0.0))
    throw ValidationError("run_coupled: epsilon must be > 0");
  problem.validate();
  if (probes.eta.size() != problem.data.size())
    throw ValidationError("run_coupled: eta probe has wrong length");
  const double eps = options.epsilon;

  detail::CoupledLane main{problem, {}, {}, {}};
  detail::CoupledLane eta{detail::perturbed_problem(problem, eps, probes.eta, +1.0), {}, {}, {}};
  std::optional<detail::CoupledLane> zeta;
  std::optional<detail::CoupledLane> rekl_plus;
  std::optional<detail::CoupledLane> rekl_minus;

  if (options.with_pukla) {
    if (probes.zeta.size() != problem.data.size())
      throw ValidationError("run_coupled: zeta probe has wrong length");
    zeta.emplace(detail::CoupledLane{
        detail::perturbed_problem(problem, eps, probes.zeta, +1.0), {}, {}, {}});
  }
  if (options.with_rekl) {
    std::span<const double> pair_probe =
        options.rekl_shares_probe ? std::span<const double>(probes.eta)
                                  : std::span<const double>(probes.rekl_eta);
    if (pair_probe.size() != problem.data.size())
      throw ValidationError("run_coupled: rekl probe has wrong length");
    if (!options.rekl_shares_probe)
      rekl_plus.emplace(detail::CoupledLane{
          detail::perturbed_problem(problem, eps, pair_probe, +1.0), {}, {}, {}});
    rekl_minus.emplace(detail::CoupledLane{
        detail::perturbed_problem(problem, eps, pair_probe, -1.0), {}, {}, {}});
  }

  auto for_each_lane = [&](auto&& fn) {
    fn(main);
    fn(eta);
    if (zeta) fn(*zeta);
    if (rekl_plus) fn(*rekl_plus);
    if (rekl_minus) fn(*rekl_minus);
  };

  for_each_lane([](detail::CoupledLane& lane) {
    lane.state = initial_state(lane.problem);
  });

  for (long k = 1; k <= k_max; ++k) {
    for_each_lane([](detail::CoupledLane& lane) {
      lane.advance();
      lane.refresh_log();
    });
    CoupledView view;
    view.k = k;
    view.data = problem.data;
    view.x = main.state.x;
    view.pred = main.state.prediction;
    view.log_pred = main.log_pred;
    view.log_pred_eta = eta.log_pred;
    if (zeta) view.log_pred_zeta = zeta->log_pred;
    if (options.with_rekl) {
      view.log_pred_rekl_plus =
          rekl_plus ? std::span<const double>(rekl_plus->log_pred)
                    : std::span<const double>(eta.log_pred);
      view.log_pred_rekl_minus = rekl_minus->log_pred;
    }
    view.probes = &probes;
    view.epsilon = eps;
    observer(view);
  }

  CoupledTrajectories out;
  out.main = std::move(main.state);
  out.perturbed_eta = std::move(eta.state);
  if (zeta) out.perturbed_zeta = std::move(zeta->state);
  if (rekl_plus) out.rekl_plus = std::move(rekl_plus->state);
  if (rekl_minus) out.rekl_minus = std::move(rekl_minus->state);
  out.probes = std::move(probes);
  out.epsilon = eps;
  return out;
}

// Draws the probes from the given stream (eta, then zeta, then the REKL eta
// when independent) and runs the coupled trajectories.
template <typename Observer>
CoupledTrajectories run_coupled(const EmProblem& problem, long k_max,
                                const CoupledOptions& options, RngStream& rng,
                                Observer&& observer) {
  const std::size_t m = problem.data.size();
  CoupledProbes probes;
  probes.eta = sample_standard_normal(m, rng);
  if (options.with_pukla) probes.zeta = sample_rademacher(m, rng);
  if (options.with_rekl && !options.rekl_shares_probe)
    probes.rekl_eta = sample_standard_normal(m, rng);
  return run_coupled_with_probes(problem, k_max, options, std::move(probes),
                                 std::forward<Observer>(observer));
}

}  // namespace emstop
