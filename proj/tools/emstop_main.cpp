// Command-line surface: simulate / reconstruct / sweep / validate.
// Exit codes: 0 success, 1 validation or config error, 2 numerical failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "emstop/em.hpp"
#include "emstop/formats.hpp"
#include "emstop/harness.hpp"
#include "emstop/io.hpp"
#include "emstop/metrics.hpp"
#include "emstop/operators.hpp"
#include "emstop/risk.hpp"
#include "emstop/validation.hpp"

namespace fs = std::filesystem;
using namespace emstop;

namespace {

void write_manifest(const fs::path& dir, const ExperimentConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& extra) {
  std::ofstream out(dir / "manifest.txt");
  if (!out) throw ValidationError("cannot write manifest in " + dir.string());
  out << "fingerprint = " << config_fingerprint(cfg) << '\n'
      << "seed = " << cfg.seed << '\n';
  for (const auto& [k, v] : extra) out << k << " = " << v << '\n';
  out << '\n' << "[config]" << '\n' << canonical_config(cfg);
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir) {
  const ExperimentConfig cfg = load_config(config_path);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);

  RngStream data_rng(cfg.seed, stream_ids::trial_data(0));
  const SimulatedData sim = simulate_data(cfg, data_rng);

  double max_count = 0.0;
  for (double v : sim.y.values) max_count = std::max(max_count, v);
  std::string data_file = "data.pgm";
  if (max_count <= 65535.0) {
    save_pgm16(sim.y, (dir / data_file).string());
  } else {
    data_file = "data.txt";  // counts exceed the 16-bit PGM range
    save_text_image(sim.y, (dir / data_file).string());
  }

  save_text_image(sim.recon_psf.image, (dir / "psf.txt").string());
  if (sim.exact_psf)
    save_text_image(sim.exact_psf->image, (dir / "psf_exact.txt").string());
  save_text_image(sim.x_true, (dir / "truth.txt").string());
  Image lambda(cfg.width, cfg.height);
  lambda.values = sim.lambda_true;
  save_text_image(lambda, (dir / "lambda.txt").string());

  write_manifest(dir, cfg,
                 {{"mode", to_string(cfg.mode)}, {"data_file", data_file}});
  std::cout << "wrote " << data_file
            << (sim.exact_psf ? ", psf.txt, psf_exact.txt" : ", psf.txt")
            << ", truth.txt, lambda.txt, manifest.txt to " << out_dir << '\n';
  return 0;
}

struct ReconstructArgs {
  std::string data_path, psf_path, background, out_dir;
  std::string rule = "paukl";
  long k_max = 2000;
  double epsilon = 1e-3;
  std::uint64_t seed = 1;
  std::string truth_path, lambda_path;
  long checkpoint_stride = 0;
  long patience = 50;
};

int cmd_reconstruct(const ReconstructArgs& args) {
  const Image data = load_image(args.data_path);
  require_nonnegative(data.values, "data");
  const Psf psf = normalized_psf(load_image(args.psf_path));

  std::vector<double> background;
  try {
    std::size_t pos = 0;
    const double level = std::stod(args.background, &pos);
    if (pos != args.background.size()) throw std::invalid_argument("");
    if (level < 0.0)
      throw ValidationError("background level must be >= 0");
    background.assign(data.size(), level);
  } catch (const std::invalid_argument&) {
    const Image bg = load_image(args.background);
    if (!bg.same_dims(data))
      throw ValidationError("background dimensions do not match the data");
    require_nonnegative(bg.values, "background");
    background = bg.values;
  }

  auto op = std::make_shared<ConvolutionOperator>(psf, data.width, data.height);
  EmProblem problem = EmProblem::ones_start(op, data.values, background);
  const std::size_t m = problem.data.size();

  std::optional<Image> truth;
  std::vector<double> lambda_true;
  if (!args.truth_path.empty()) {
    truth = load_image(args.truth_path);
    if (!truth->same_dims(data))
      throw ValidationError("truth dimensions do not match the data");
    if (!args.lambda_path.empty()) {
      lambda_true = load_image(args.lambda_path).values;
      if (lambda_true.size() != m)
        throw ValidationError("lambda dimensions do not match the data");
    } else {
      // inverse-crime convention: the prediction of the truth under this psf
      lambda_true = op->apply(truth->values);
      for (std::size_t i = 0; i < m; ++i) {
        lambda_true[i] += background[i];
        if (lambda_true[i] < 0.0) lambda_true[i] = 0.0;
      }
    }
  }

  fs::create_directories(args.out_dir);
  const fs::path dir(args.out_dir);
  if (args.checkpoint_stride > 0)
    fs::create_directories(dir / "checkpoints");

  CoupledOptions opt;
  opt.epsilon = args.epsilon;
  RngStream probe_rng(args.seed, 1);

  RiskCurve curve;
  curve.samples.reserve(args.k_max);
  run_coupled(problem, args.k_max, opt, probe_rng, [&](const CoupledView& v) {
    RiskSample s;
    s.k = v.k;
    s.d_kl = kl_divergence(v.data, v.pred);
    s.paukl =
        paukl(v.data, v.log_pred, v.log_pred_eta, v.probes->eta, v.epsilon, m);
    s.pukla = pukla_approx(v.data, v.log_pred, v.log_pred_zeta, v.probes->zeta,
                           v.epsilon);
    s.rekl = rekl(v.data, v.pred, v.log_pred_rekl_plus, v.log_pred_rekl_minus,
                  v.probes->rekl_eta, v.epsilon, m);
    s.pdp = poisson_discrepancy(s.d_kl, m).pdp;
    curve.samples.push_back(s);
    if (truth) {
      OracleSample o;
      o.k = v.k;
      o.pe = predictive_error(lambda_true, v.pred);
      const auto errs = reconstruction_errors(truth->values, v.x);
      o.err_kl = errs.err_kl;
      o.err_l2 = errs.err_l2;
      curve.oracle.push_back(o);
    }
    if (args.checkpoint_stride > 0 && v.k % args.checkpoint_stride == 0) {
      Image snap(data.width, data.height);
      snap.values.assign(v.x.begin(), v.x.end());
      char name[32];
      std::snprintf(name, sizeof(name), "x_%06ld.txt", v.k);
      save_text_image(snap, (dir / "checkpoints" / name).string());
    }
  });
  write_curve_csv(curve, (dir / "curve.csv").string());

  auto track = [&](auto proj) {
    std::vector<double> v;
    v.reserve(curve.samples.size());
    for (const RiskSample& s : curve.samples) v.push_back(proj(s));
    return v;
  };
  const ArgminResult min_paukl =
      argmin_iteration(track([](const RiskSample& s) { return s.paukl; }), 1,
                       args.patience);
  const ArgminResult min_pukla =
      argmin_iteration(track([](const RiskSample& s) { return s.pukla; }), 1,
                       args.patience);
  const ArgminResult min_rekl = argmin_iteration(
      track([](const RiskSample& s) { return s.rekl; }), 1, args.patience);
  const ArgminResult min_pdp = argmin_iteration(
      track([](const RiskSample& s) { return s.pdp; }), 1, args.patience);

  const double half_m = 0.5 * static_cast<double>(m);
  long pdp_first_k = 0;
  for (const RiskSample& s : curve.samples)
    if (s.d_kl < half_m) {
      pdp_first_k = s.k;
      break;
    }

  long selected_k = args.k_max;
  bool selected_reached = true;
  if (args.rule == "paukl") {
    selected_k = min_paukl.k;
    selected_reached = min_paukl.reached;
  } else if (args.rule == "pukla") {
    selected_k = min_pukla.k;
    selected_reached = min_pukla.reached;
  } else if (args.rule == "rekl") {
    selected_k = min_rekl.k;
    selected_reached = min_rekl.reached;
  } else if (args.rule == "pdp") {
    // stop at the first iteration satisfying the discrepancy principle
    selected_k = pdp_first_k > 0 ? pdp_first_k : args.k_max;
    selected_reached = pdp_first_k > 0;
  }  // "fixed": exactly k_max

  // rerun the plain trajectory to the selected iterate
  const EmState final_state = run_trajectory(problem, selected_k);
  Image recon(data.width, data.height);
  recon.values = final_state.x;
  save_text_image(recon, (dir / "recon.txt").string());

  std::ofstream rep(dir / "report.txt");
  rep << "data = " << args.data_path << '\n'
      << "psf = " << args.psf_path << '\n'
      << "M = " << m << '\n'
      << "half_M = " << format_double(half_m) << '\n'
      << "k_max = " << args.k_max << '\n'
      << "epsilon = " << format_double(args.epsilon) << '\n'
      << "seed = " << args.seed << '\n'
      << "rule = " << args.rule << '\n'
      << "selected_k = " << selected_k << '\n'
      << "selected_minimum_reached = " << (selected_reached ? "yes" : "no")
      << '\n'
      << "pdp_satisfied = " << (pdp_first_k > 0 ? "yes" : "no") << '\n'
      << "pdp_first_k = " << pdp_first_k << '\n';
  auto line = [&rep](const char* name, const ArgminResult& r) {
    rep << "min_" << name << " = k " << r.k << ", value "
        << format_double(r.value) << (r.reached ? "" : " (not reached)")
        << '\n';
  };
  line("paukl", min_paukl);
  line("pukla", min_pukla);
  line("rekl", min_rekl);
  line("pdp", min_pdp);
  if (truth) {
    const ArgminResult min_pe = argmin_iteration(
        [&] {
          std::vector<double> v;
          for (const OracleSample& o : curve.oracle) v.push_back(o.pe);
          return v;
        }(),
        1, args.patience);
    line("pe", min_pe);
  }
  std::cout << "selected k = " << selected_k << " by rule '" << args.rule
            << "'; outputs in " << args.out_dir << '\n';
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir,
              int workers) {
  const ExperimentConfig cfg = load_config(config_path);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);

  const SweepResult res = run_sweep(cfg, workers);

  write_summary_csv(res.summary, (dir / "summary.csv").string());
  write_aggregate_csv(res.aggregate, (dir / "spr.csv").string());

  std::ofstream trials(dir / "trials.csv");
  trials << "realization,failed,rule,k,min_value,reached\n";
  for (const TrialResult& t : res.trials) {
    if (t.report.failed) {
      trials << t.report.realization << ",1,,,,\n";
      continue;
    }
    const auto decisions = rule_decisions(t.report);
    for (std::size_t r = 0; r < kRuleNames.size(); ++r)
      trials << t.report.realization << ",0," << kRuleNames[r] << ','
             << decisions[r]->k << ',' << format_double(decisions[r]->value)
             << ',' << (decisions[r]->reached ? 1 : 0) << '\n';
  }

  for (const TrialResult& t : res.trials) {
    if (t.report.failed) continue;
    char name[32];
    std::snprintf(name, sizeof(name), "curve_%03d.csv", t.report.realization);
    write_curve_csv(t.curve, (dir / name).string());
  }

  write_manifest(dir, cfg,
                 {{"mode", to_string(cfg.mode)},
                  {"n_failed", std::to_string(res.n_failed)}});
  std::cout << "sweep of " << cfg.n_realizations << " realizations done, "
            << res.n_failed << " failed; outputs in " << out_dir << '\n';
  return 0;
}

int cmd_validate(const std::string& check, std::uint64_t seed) {
  CheckReport rep;
  if (check == "stein")
    rep = check_stein_lemma(seed);
  else if (check == "half-m")
    rep = check_half_m(seed);
  else if (check == "adjoint")
    rep = check_adjoint(seed);
  else if (check == "homogeneity")
    rep = check_homogeneity(seed);
  else if (check == "lemma5")
    rep = check_lemma5(seed);
  else
    throw ValidationError("unknown check: " + check);

  std::cout << rep.details;
  std::cout << "check '" << rep.name << "': " << (rep.passed ? "PASS" : "FAIL")
            << '\n';
  return rep.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Early-stopped EM (Richardson-Lucy) for Poisson inverse problems"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  int workers = 1;

  auto* sim = app.add_subcommand("simulate", "Generate a data realization");
  sim->add_option("--config", config_path, "experiment config file")->required();
  sim->add_option("--out", out_dir, "output directory")->required();

  ReconstructArgs rec;
  auto* recon = app.add_subcommand("reconstruct", "Run EM with a stopping rule");
  recon->add_option("--data", rec.data_path, "counts image (P-TXT or PGM)")->required();
  recon->add_option("--psf", rec.psf_path, "psf image")->required();
  recon->add_option("--background", rec.background,
                    "constant level or image path")->required();
  recon->add_option("--out", rec.out_dir, "output directory")->required();
  recon->add_option("--k-max", rec.k_max, "iteration budget");
  recon->add_option("--epsilon", rec.epsilon, "probe step");
  recon->add_option("--rule", rec.rule, "paukl|pukla|rekl|pdp|fixed")
      ->check(CLI::IsMember({"paukl", "pukla", "rekl", "pdp", "fixed"}));
  recon->add_option("--seed", rec.seed, "probe seed");
  recon->add_option("--truth", rec.truth_path, "ground-truth image (optional)");
  recon->add_option("--lambda", rec.lambda_path,
                    "true mean image for PE (optional)");
  recon->add_option("--checkpoint-stride", rec.checkpoint_stride,
                    "dump x_k every N iterations (0 = off)");
  recon->add_option("--patience", rec.patience,
                    "window for the minimum-reached rule");

  auto* sweep = app.add_subcommand("sweep", "Multi-realization experiment");
  sweep->add_option("--config", config_path, "experiment config file")->required();
  sweep->add_option("--out", out_dir, "output directory")->required();
  sweep->add_option("--workers", workers, "worker threads");

  std::string check;
  std::uint64_t vseed = 12345;
  auto* validate = app.add_subcommand("validate", "Statistical/numerical checks");
  validate->add_option("--check", check, "stein|half-m|adjoint|homogeneity|lemma5")
      ->required()
      ->check(CLI::IsMember({"stein", "half-m", "adjoint", "homogeneity",
                             "lemma5"}));
  validate->add_option("--seed", vseed, "rng seed");

  try {
    app.parse(argc, argv);
    if (sim->parsed()) return cmd_simulate(config_path, out_dir);
    if (recon->parsed()) return cmd_reconstruct(rec);
    if (sweep->parsed()) return cmd_sweep(config_path, out_dir, workers);
    if (validate->parsed()) return cmd_validate(check, vseed);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
