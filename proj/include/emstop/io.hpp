#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "emstop/errors.hpp"
#include "emstop/formats.hpp"
#include "emstop/harness.hpp"
#include "emstop/metrics.hpp"

namespace emstop {

// Curve CSV: "k,d_kl,paukl,pukla,rekl,pdp[,pe,err_kl,err_l2]", one row per
// iteration, reals printed so they parse back bit-identically.
inline void write_curve_csv(const RiskCurve& curve, const std::string& path) {
  curve.validate();
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out << "k,d_kl,paukl,pukla,rekl,pdp";
  if (curve.has_oracle()) out << ",pe,err_kl,err_l2";
  out << '\n';
  for (std::size_t i = 0; i < curve.samples.size(); ++i) {
    const RiskSample& s = curve.samples[i];
    out << s.k << ',' << format_double(s.d_kl) << ',' << format_double(s.paukl)
        << ',' << format_double(s.pukla) << ',' << format_double(s.rekl) << ','
        << format_double(s.pdp);
    if (curve.has_oracle()) {
      const OracleSample& o = curve.oracle[i];
      out << ',' << format_double(o.pe) << ',' << format_double(o.err_kl)
          << ',' << format_double(o.err_l2);
    }
    out << '\n';
  }
  if (!out) throw ValidationError("write failed: " + path);
}

inline RiskCurve read_curve_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open: " + path);
  std::string header;
  if (!std::getline(in, header))
    throw ValidationError("empty curve csv: " + path);
  bool oracle;
  if (header == "k,d_kl,paukl,pukla,rekl,pdp")
    oracle = false;
  else if (header == "k,d_kl,paukl,pukla,rekl,pdp,pe,err_kl,err_l2")
    oracle = true;
  else
    throw ValidationError("unexpected curve csv header in " + path);

  RiskCurve curve;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    auto next = [&]() {
      if (!std::getline(row, cell, ','))
        throw ValidationError("short row in " + path);
      return std::stod(cell);
    };
    RiskSample s;
    s.k = static_cast<long>(next());
    s.d_kl = next();
    s.paukl = next();
    s.pukla = next();
    s.rekl = next();
    s.pdp = next();
    curve.samples.push_back(s);
    if (oracle) {
      OracleSample o;
      o.k = s.k;
      o.pe = next();
      o.err_kl = next();
      o.err_l2 = next();
      curve.oracle.push_back(o);
    }
  }
  curve.validate();
  return curve;
}

// Aggregate CSV with the SPR and per-estimator mean/stddev tracks.
inline void write_aggregate_csv(const AggregatedCurves& agg,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out << "k,d_kl_mean,paukl_mean,paukl_std,pukla_mean,pukla_std,rekl_mean,"
         "rekl_std,pdp_mean,pdp_std";
  if (agg.has_oracle) out << ",spr,er_kl,er_l2";
  out << '\n';
  for (std::size_t i = 0; i < agg.k.size(); ++i) {
    out << agg.k[i] << ',' << format_double(agg.d_kl.mean[i]) << ','
        << format_double(agg.paukl.mean[i]) << ','
        << format_double(agg.paukl.stddev[i]) << ','
        << format_double(agg.pukla.mean[i]) << ','
        << format_double(agg.pukla.stddev[i]) << ','
        << format_double(agg.rekl.mean[i]) << ','
        << format_double(agg.rekl.stddev[i]) << ','
        << format_double(agg.pdp.mean[i]) << ','
        << format_double(agg.pdp.stddev[i]);
    if (agg.has_oracle)
      out << ',' << format_double(agg.spr[i]) << ','
          << format_double(agg.er_kl[i]) << ',' << format_double(agg.er_l2[i]);
    out << '\n';
  }
  if (!out) throw ValidationError("write failed: " + path);
}

// Summary CSV mirroring the per-rule stopping-iteration table.
inline void write_summary_csv(const std::vector<SweepSummaryRow>& rows,
                              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out << "rule,mean_k,std_k,n_failed\n";
  for (const SweepSummaryRow& r : rows)
    out << r.rule << ',' << format_double(r.mean_k) << ','
        << format_double(r.std_k) << ',' << r.n_failed << '\n';
  if (!out) throw ValidationError("write failed: " + path);
}

// Plain "key = value" config file; '#' starts a comment. The seed is
// mandatory so every run is reproducible by construction.
inline ExperimentConfig parse_config(std::istream& in,
                                     const std::string& source) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(source + ":" + std::to_string(lineno) +
                            ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ValidationError(source + ":" + std::to_string(lineno) +
                            ": empty key or value");
    if (!kv.emplace(key, value).second)
      throw ValidationError(source + ": duplicate key '" + key + "'");
  }

  ExperimentConfig cfg;
  bool have_seed = false;
  auto to_double = [&](const std::string& k, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ValidationError(source + ": bad number for '" + k + "': " + v);
    }
  };
  auto to_long = [&](const std::string& k, const std::string& v) {
    const double d = to_double(k, v);
    if (d != std::floor(d))
      throw ValidationError(source + ": expected integer for '" + k + "'");
    return static_cast<long>(d);
  };

  for (const auto& [key, value] : kv) {
    if (key == "width")
      cfg.width = static_cast<int>(to_long(key, value));
    else if (key == "height")
      cfg.height = static_cast<int>(to_long(key, value));
    else if (key == "phantom")
      cfg.phantom = value;
    else if (key == "psf_sigma")
      cfg.psf_sigma = to_double(key, value);
    else if (key == "flux")
      cfg.flux = to_double(key, value);
    else if (key == "background_level")
      cfg.background_level = to_double(key, value);
    else if (key == "n_realizations")
      cfg.n_realizations = static_cast<int>(to_long(key, value));
    else if (key == "k_max")
      cfg.k_max = to_long(key, value);
    else if (key == "epsilon")
      cfg.epsilon = to_double(key, value);
    else if (key == "seed") {
      try {
        std::size_t pos = 0;
        cfg.seed = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
      } catch (const std::exception&) {
        throw ValidationError(source + ": bad seed: " + value);
      }
      have_seed = true;
    } else if (key == "mode")
      cfg.mode = parse_mode(value);
    else if (key == "psf_noise_scale")
      cfg.psf_noise_scale = to_double(key, value);
    else if (key == "rekl_shares_probe")
      cfg.rekl_shares_probe = (value == "true" || value == "1");
    else if (key == "patience")
      cfg.patience = to_long(key, value);
    else
      throw ValidationError(source + ": unknown key '" + key + "'");
  }
  if (!have_seed)
    throw ValidationError(source + ": 'seed' is required");
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config: " + path);
  return parse_config(in, path);
}

// Canonical text form of a config, used for fingerprinting.
inline std::string canonical_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "width = " << cfg.width << '\n'
      << "height = " << cfg.height << '\n'
      << "phantom = " << cfg.phantom << '\n'
      << "psf_sigma = " << format_double(cfg.psf_sigma) << '\n'
      << "flux = " << format_double(cfg.flux) << '\n'
      << "background_level = " << format_double(cfg.background_level) << '\n'
      << "n_realizations = " << cfg.n_realizations << '\n'
      << "k_max = " << cfg.k_max << '\n'
      << "epsilon = " << format_double(cfg.epsilon) << '\n'
      << "seed = " << cfg.seed << '\n'
      << "mode = " << to_string(cfg.mode) << '\n'
      << "psf_noise_scale = " << format_double(cfg.psf_noise_scale) << '\n'
      << "rekl_shares_probe = " << (cfg.rekl_shares_probe ? "true" : "false")
      << '\n'
      << "patience = " << cfg.patience << '\n';
  return out.str();
}

// FNV-1a 64 over the canonical form.
inline std::string config_fingerprint(const ExperimentConfig& cfg) {
  const std::string text = canonical_config(cfg);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace emstop
