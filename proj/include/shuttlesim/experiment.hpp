#pragma once

// End-to-end experiment runner: parses a config file, synthesizes
// shot-level data through the pulse -> landscape -> spin -> readout chain,
// runs the scan-line fits and writes a reproducible artifact bundle
//   <outdir>/<experiment>/<label>/{data.csv, fits.json, manifest.json}
//
// Identical (config, seed) produce byte-identical bundles regardless of
// the worker count: every scan point derives its own RNG stream from the
// master seed, shots are synthesized twice (calibration pass for the
// readout threshold, classification pass for the statistics) from the
// same per-point stream, and results are reduced in point order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "shuttlesim/analysis.hpp"
#include "shuttlesim/io.hpp"
#include "shuttlesim/landscape.hpp"
#include "shuttlesim/pulse.hpp"
#include "shuttlesim/readout.hpp"
#include "shuttlesim/spinsim.hpp"

namespace shuttlesim {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind {
  st0_dqd,
  coherent_shuttle_map,
  wait_map,
  long_distance,
  charge_fidelity_scan,
};

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::st0_dqd: return "st0_dqd";
    case ExperimentKind::coherent_shuttle_map: return "coherent_shuttle_map";
    case ExperimentKind::wait_map: return "wait_map";
    case ExperimentKind::long_distance: return "long_distance";
    case ExperimentKind::charge_fidelity_scan: return "charge_fidelity_scan";
  }
  return "?";
}

inline ExperimentKind experiment_from_string(const std::string& s) {
  for (int k = 0; k <= static_cast<int>(ExperimentKind::charge_fidelity_scan); ++k)
    if (to_string(static_cast<ExperimentKind>(k)) == s)
      return static_cast<ExperimentKind>(k);
  throw ConfigError("unknown experiment: " + s);
}

struct PulseConfig {
  double lambda_nm = 280.0;
  double u_lower_v = 0.150;
  bool crosstalk_compensation = true;
  double max_frequency_hz = 1e7;
  double usable_range_nm = 336.0;

  double v_max_mps() const { return max_frequency_hz * lambda_nm * 1e-9; }
};

struct SpinConfig {
  double t2l_static_ns = 0.0;
  ValleyMixing valley;
};

struct ReadoutConfig {
  SetNoiseModel noise{0.0, 0.125, 1.0, 0.10};
  bool four_is_upper = true;
  std::string threshold_mode = "auto";  // auto | fixed | analytic
  double fixed_threshold = 0.0;
  double false_singlet = 0.0;  // P(record 4 | triplet)
  double false_triplet = 0.0;  // P(record 3 | singlet)
};

struct ChargeLegModel {
  std::string model = "constant";  // constant | logistic (in U_lower)
  double p = 0.9986;
  double u0_mv = 110.0;
  double scale_mv = 4.0;
  double max = 0.9986;

  double success(double u_lower_mv) const {
    if (model == "constant") return p;
    return max / (1.0 + std::exp(-(u_lower_mv - u0_mv) / scale_mv));
  }
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::st0_dqd;
  std::string label = "run";
  std::vector<double> magnetic_fields_t{0.8};
  int shots_per_point = 50000;
  std::uint64_t master_seed = 1;
  std::string output_dir = "out";
  DisorderSpec disorder;
  PulseConfig pulse;
  SpinConfig spin;
  ReadoutConfig readout;
  ChargeLegModel charge;

  std::vector<double> tau_dqd_ns, tau_s_ns, d_nm, x_nm, tau_w_ns, u_lower_mv, f_mhz;
  std::vector<int> loops_d;
};

inline nlohmann::json config_echo(const ExperimentConfig& cfg) {
  nlohmann::json scan = nlohmann::json::object();
  auto put_axis = [&](const char* key, const std::vector<double>& axis) {
    if (!axis.empty()) scan[key] = axis;
  };
  put_axis("tau_dqd_ns", cfg.tau_dqd_ns);
  put_axis("tau_s_ns", cfg.tau_s_ns);
  put_axis("d_nm", cfg.d_nm);
  put_axis("x_nm", cfg.x_nm);
  put_axis("tau_w_ns", cfg.tau_w_ns);
  put_axis("u_lower_mv", cfg.u_lower_mv);
  put_axis("f_mhz", cfg.f_mhz);
  if (!cfg.loops_d.empty()) scan["loops_d"] = cfg.loops_d;

  return {{"experiment", to_string(cfg.experiment)},
          {"label", cfg.label},
          {"magnetic_field_t", cfg.magnetic_fields_t},
          {"shots_per_point", cfg.shots_per_point},
          {"master_seed", cfg.master_seed},
          {"output_dir", cfg.output_dir},
          {"disorder", cfg.disorder.to_json()},
          {"pulse",
           {{"lambda_nm", cfg.pulse.lambda_nm},
            {"u_lower_v", cfg.pulse.u_lower_v},
            {"crosstalk_compensation", cfg.pulse.crosstalk_compensation},
            {"max_frequency_hz", cfg.pulse.max_frequency_hz},
            {"usable_range_nm", cfg.pulse.usable_range_nm}}},
          {"spin",
           {{"t2l_static_ns", cfg.spin.t2l_static_ns},
            {"valley",
             {{"weight_alt", cfg.spin.valley.weight_alt},
              {"mean_dg_alt", cfg.spin.valley.mean_dg_alt}}}}},
          {"readout",
           {{"mu3", cfg.readout.noise.mu3},
            {"sigma3", cfg.readout.noise.sigma3},
            {"mu4", cfg.readout.noise.mu4},
            {"sigma4", cfg.readout.noise.sigma4},
            {"four_is_upper", cfg.readout.four_is_upper},
            {"threshold_mode", cfg.readout.threshold_mode},
            {"fixed_threshold", cfg.readout.fixed_threshold},
            {"false_singlet", cfg.readout.false_singlet},
            {"false_triplet", cfg.readout.false_triplet}}},
          {"charge",
           {{"model", cfg.charge.model},
            {"p", cfg.charge.p},
            {"u0_mv", cfg.charge.u0_mv},
            {"scale_mv", cfg.charge.scale_mv},
            {"max", cfg.charge.max}}},
          {"scan", scan}};
}

// --- config parsing (fail-closed: unknown keys are errors) -------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& path, std::vector<std::string>& problems) {
  if (!j.is_object()) {
    problems.push_back(path + ": expected an object");
    return;
  }
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      problems.push_back(path + ": unknown key '" + key + "'");
}

inline std::vector<double> parse_axis(const nlohmann::json& j, const std::string& path,
                                      std::vector<std::string>& problems) {
  std::vector<double> values;
  if (j.is_array()) {
    for (const auto& v : j) {
      if (!v.is_number()) {
        problems.push_back(path + ": entries must be numbers");
        return values;
      }
      values.push_back(v.get<double>());
    }
  } else if (j.is_object()) {
    check_keys(j, {"start", "stop", "step"}, path, problems);
    if (!j.contains("start") || !j.contains("stop") || !j.contains("step")) {
      problems.push_back(path + ": range needs start, stop, step");
      return values;
    }
    const double start = j.at("start").get<double>();
    const double stop = j.at("stop").get<double>();
    const double step = j.at("step").get<double>();
    if (step <= 0.0) {
      problems.push_back(path + ": step must be > 0");
      return values;
    }
    for (double v = start; v <= stop + 1e-9 * step; v += step) values.push_back(v);
  } else {
    problems.push_back(path + ": expected array or {start, stop, step}");
  }
  if (values.empty()) problems.push_back(path + ": scan range is empty");
  return values;
}

inline void line_col_of_offset(const std::string& text, std::size_t byte,
                               std::size_t& line, std::size_t& col) {
  line = 1;
  col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
}

}  // namespace detail

// Parses and cross-checks a config document; returns every violation
// found. An empty list means the config is runnable.
inline std::vector<std::string> parse_config(const nlohmann::json& j,
                                             ExperimentConfig& cfg) {
  std::vector<std::string> problems;
  detail::check_keys(j,
                     {"experiment", "label", "magnetic_field_t", "shots_per_point",
                      "master_seed", "output_dir", "disorder", "pulse", "spin",
                      "readout", "charge", "scan"},
                     "config", problems);

  try {
    if (!j.contains("experiment")) {
      problems.push_back("config: missing 'experiment'");
      return problems;
    }
    cfg.experiment = experiment_from_string(j.at("experiment").get<std::string>());
    cfg.label = j.value("label", std::string("run"));
    if (j.contains("magnetic_field_t")) {
      cfg.magnetic_fields_t.clear();
      if (j.at("magnetic_field_t").is_array())
        for (const auto& b : j.at("magnetic_field_t"))
          cfg.magnetic_fields_t.push_back(b.get<double>());
      else
        cfg.magnetic_fields_t.push_back(j.at("magnetic_field_t").get<double>());
    }
    cfg.shots_per_point = j.value("shots_per_point", 50000);
    cfg.master_seed = j.value("master_seed", std::uint64_t{1});
    cfg.output_dir = j.value("output_dir", std::string("out"));

    if (j.contains("disorder")) {
      const auto& d = j.at("disorder");
      detail::check_keys(d,
                         {"grid_step_nm", "channel_length_nm", "sigma_dg", "mean_dg",
                          "sigma_hf_nev", "mean_hf_nev", "correlation_length_nm",
                          "kernel", "seed"},
                         "disorder", problems);
      cfg.disorder.grid_step_nm = d.value("grid_step_nm", 1.0);
      cfg.disorder.channel_length_nm = d.value("channel_length_nm", 400.0);
      cfg.disorder.sigma_dg = d.value("sigma_dg", 0.0);
      cfg.disorder.mean_dg = d.value("mean_dg", 6.51e-4);
      cfg.disorder.sigma_hf_nev = d.value("sigma_hf_nev", 0.0);
      cfg.disorder.mean_hf_nev = d.value("mean_hf_nev", 0.0);
      cfg.disorder.correlation_length_nm = d.value("correlation_length_nm", 13.0);
      cfg.disorder.kernel =
          kernel_from_string(d.value("kernel", std::string("exponential")));
      cfg.disorder.seed = d.value("seed", std::uint64_t{0});
    }
    if (j.contains("pulse")) {
      const auto& p = j.at("pulse");
      detail::check_keys(p,
                         {"lambda_nm", "u_lower_v", "crosstalk_compensation",
                          "max_frequency_hz", "usable_range_nm"},
                         "pulse", problems);
      cfg.pulse.lambda_nm = p.value("lambda_nm", 280.0);
      cfg.pulse.u_lower_v = p.value("u_lower_v", 0.150);
      cfg.pulse.crosstalk_compensation = p.value("crosstalk_compensation", true);
      cfg.pulse.max_frequency_hz = p.value("max_frequency_hz", 1e7);
      cfg.pulse.usable_range_nm = p.value("usable_range_nm", 336.0);
    }
    if (j.contains("spin")) {
      const auto& s = j.at("spin");
      detail::check_keys(s, {"t2l_static_ns", "valley"}, "spin", problems);
      cfg.spin.t2l_static_ns = s.value("t2l_static_ns", 0.0);
      if (s.contains("valley")) {
        detail::check_keys(s.at("valley"), {"weight_alt", "mean_dg_alt"},
                           "spin.valley", problems);
        cfg.spin.valley.weight_alt = s.at("valley").value("weight_alt", 0.0);
        cfg.spin.valley.mean_dg_alt = s.at("valley").value("mean_dg_alt", 0.0);
      }
    }
    if (j.contains("readout")) {
      const auto& r = j.at("readout");
      detail::check_keys(r,
                         {"mu3", "sigma3", "mu4", "sigma4", "four_is_upper",
                          "threshold_mode", "fixed_threshold", "false_singlet",
                          "false_triplet"},
                         "readout", problems);
      cfg.readout.noise.mu3 = r.value("mu3", 0.0);
      cfg.readout.noise.sigma3 = r.value("sigma3", 0.125);
      cfg.readout.noise.mu4 = r.value("mu4", 1.0);
      cfg.readout.noise.sigma4 = r.value("sigma4", 0.10);
      cfg.readout.four_is_upper = r.value("four_is_upper", true);
      cfg.readout.threshold_mode = r.value("threshold_mode", std::string("auto"));
      cfg.readout.fixed_threshold = r.value("fixed_threshold", 0.0);
      cfg.readout.false_singlet = r.value("false_singlet", 0.0);
      cfg.readout.false_triplet = r.value("false_triplet", 0.0);
    }
    if (j.contains("charge")) {
      const auto& c = j.at("charge");
      detail::check_keys(c, {"model", "p", "u0_mv", "scale_mv", "max"}, "charge",
                         problems);
      cfg.charge.model = c.value("model", std::string("constant"));
      cfg.charge.p = c.value("p", 0.9986);
      cfg.charge.u0_mv = c.value("u0_mv", 110.0);
      cfg.charge.scale_mv = c.value("scale_mv", 4.0);
      cfg.charge.max = c.value("max", 0.9986);
      if (cfg.charge.model != "constant" && cfg.charge.model != "logistic")
        problems.push_back("charge.model: must be constant or logistic");
    }

    const std::set<std::string> axis_keys = {"tau_dqd_ns", "tau_s_ns", "d_nm",
                                             "x_nm",       "tau_w_ns", "u_lower_mv",
                                             "f_mhz",      "loops_d"};
    if (j.contains("scan")) {
      detail::check_keys(j.at("scan"), axis_keys, "scan", problems);
      const auto& scan = j.at("scan");
      auto grab = [&](const char* key, std::vector<double>& out) {
        if (scan.contains(key))
          out = detail::parse_axis(scan.at(key), std::string("scan.") + key, problems);
      };
      grab("tau_dqd_ns", cfg.tau_dqd_ns);
      grab("tau_s_ns", cfg.tau_s_ns);
      grab("d_nm", cfg.d_nm);
      grab("x_nm", cfg.x_nm);
      grab("tau_w_ns", cfg.tau_w_ns);
      grab("u_lower_mv", cfg.u_lower_mv);
      grab("f_mhz", cfg.f_mhz);
      if (scan.contains("loops_d")) {
        for (const double v :
             detail::parse_axis(scan.at("loops_d"), "scan.loops_d", problems)) {
          if (v < 1.0 || std::abs(v - std::round(v)) > 1e-9)
            problems.push_back("scan.loops_d: entries must be positive integers");
          else
            cfg.loops_d.push_back(static_cast<int>(std::llround(v)));
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    problems.push_back(std::string("config: ") + e.what());
    return problems;
  }

  // --- semantic / physics checks ---
  if (cfg.shots_per_point < 1) problems.push_back("shots_per_point: must be >= 1");
  if (cfg.magnetic_fields_t.empty() || cfg.magnetic_fields_t.size() > 2)
    problems.push_back("magnetic_field_t: need one value (or two for ratio studies)");
  for (const double b : cfg.magnetic_fields_t)
    if (b <= 0.0) problems.push_back("magnetic_field_t: fields must be > 0");
  if (cfg.magnetic_fields_t.size() == 2 &&
      cfg.experiment != ExperimentKind::coherent_shuttle_map)
    problems.push_back(
        "magnetic_field_t: two fields only supported by coherent_shuttle_map");
  try {
    cfg.disorder.validate();
  } catch (const std::exception& e) {
    problems.push_back(std::string("disorder: ") + e.what());
  }
  if (cfg.readout.noise.sigma3 <= 0.0 || cfg.readout.noise.sigma4 <= 0.0)
    problems.push_back("readout: sigma3 and sigma4 must be > 0");
  if (cfg.readout.threshold_mode != "auto" && cfg.readout.threshold_mode != "fixed" &&
      cfg.readout.threshold_mode != "analytic")
    problems.push_back("readout.threshold_mode: must be auto, fixed or analytic");
  if (cfg.spin.valley.weight_alt < 0.0 || cfg.spin.valley.weight_alt > 1.0)
    problems.push_back("spin.valley.weight_alt: must be in [0, 1]");

  auto require_axis = [&](const std::vector<double>& axis, const char* name) {
    if (axis.empty())
      problems.push_back(std::string("scan.") + name + ": required for " +
                         to_string(cfg.experiment));
  };
  auto forbid_axis = [&](bool present, const char* name) {
    if (present)
      problems.push_back(std::string("scan.") + name + ": not used by " +
                         to_string(cfg.experiment));
  };
  const bool has_loops = !cfg.loops_d.empty();
  switch (cfg.experiment) {
    case ExperimentKind::st0_dqd:
      require_axis(cfg.tau_dqd_ns, "tau_dqd_ns");
      forbid_axis(!cfg.tau_s_ns.empty(), "tau_s_ns");
      forbid_axis(!cfg.d_nm.empty(), "d_nm");
      forbid_axis(!cfg.x_nm.empty(), "x_nm");
      forbid_axis(!cfg.tau_w_ns.empty(), "tau_w_ns");
      forbid_axis(!cfg.u_lower_mv.empty(), "u_lower_mv");
      forbid_axis(!cfg.f_mhz.empty(), "f_mhz");
      forbid_axis(has_loops, "loops_d");
      break;
    case ExperimentKind::coherent_shuttle_map:
      require_axis(cfg.tau_s_ns, "tau_s_ns");
      require_axis(cfg.d_nm, "d_nm");
      forbid_axis(!cfg.tau_dqd_ns.empty(), "tau_dqd_ns");
      forbid_axis(!cfg.x_nm.empty(), "x_nm");
      forbid_axis(!cfg.tau_w_ns.empty(), "tau_w_ns");
      forbid_axis(!cfg.u_lower_mv.empty(), "u_lower_mv");
      forbid_axis(!cfg.f_mhz.empty(), "f_mhz");
      forbid_axis(has_loops, "loops_d");
      break;
    case ExperimentKind::wait_map:
      require_axis(cfg.x_nm, "x_nm");
      require_axis(cfg.tau_w_ns, "tau_w_ns");
      forbid_axis(!cfg.tau_dqd_ns.empty(), "tau_dqd_ns");
      forbid_axis(!cfg.tau_s_ns.empty(), "tau_s_ns");
      forbid_axis(!cfg.d_nm.empty(), "d_nm");
      forbid_axis(!cfg.u_lower_mv.empty(), "u_lower_mv");
      forbid_axis(!cfg.f_mhz.empty(), "f_mhz");
      forbid_axis(has_loops, "loops_d");
      break;
    case ExperimentKind::long_distance:
      if (!has_loops) problems.push_back("scan.loops_d: required for long_distance");
      require_axis(cfg.tau_dqd_ns, "tau_dqd_ns");
      forbid_axis(!cfg.tau_s_ns.empty(), "tau_s_ns");
      forbid_axis(!cfg.d_nm.empty(), "d_nm");
      forbid_axis(!cfg.x_nm.empty(), "x_nm");
      forbid_axis(!cfg.tau_w_ns.empty(), "tau_w_ns");
      forbid_axis(!cfg.u_lower_mv.empty(), "u_lower_mv");
      forbid_axis(!cfg.f_mhz.empty(), "f_mhz");
      break;
    case ExperimentKind::charge_fidelity_scan: {
      const bool has_u = !cfg.u_lower_mv.empty();
      const bool has_f = !cfg.f_mhz.empty();
      if (has_u == has_f)
        problems.push_back(
            "charge_fidelity_scan: provide exactly one of scan.u_lower_mv, scan.f_mhz");
      forbid_axis(!cfg.tau_dqd_ns.empty(), "tau_dqd_ns");
      forbid_axis(!cfg.tau_s_ns.empty(), "tau_s_ns");
      forbid_axis(!cfg.d_nm.empty(), "d_nm");
      forbid_axis(!cfg.x_nm.empty(), "x_nm");
      forbid_axis(!cfg.tau_w_ns.empty(), "tau_w_ns");
      forbid_axis(has_loops, "loops_d");
      break;
    }
  }

  const double bound = cfg.pulse.usable_range_nm;
  for (const double d : cfg.d_nm)
    if (d < 0.0 || d > bound)
      problems.push_back("scan.d_nm: distance " + io::format_double(d) +
                         " nm outside the usable range 0.." + io::format_double(bound) +
                         " nm (electron return probability collapses beyond it)");
  for (const double x : cfg.x_nm)
    if (x < 0.0 || x > bound)
      problems.push_back("scan.x_nm: position " + io::format_double(x) +
                         " nm outside the usable range 0.." + io::format_double(bound) +
                         " nm");
  for (const double t : cfg.tau_dqd_ns)
    if (t < 0.0) problems.push_back("scan.tau_dqd_ns: times must be >= 0");
  for (const double t : cfg.tau_w_ns)
    if (t < 0.0) problems.push_back("scan.tau_w_ns: times must be >= 0");
  for (const double t : cfg.tau_s_ns)
    if (t <= 0.0) problems.push_back("scan.tau_s_ns: times must be > 0");
  for (const double f : cfg.f_mhz)
    if (f <= 0.0) problems.push_back("scan.f_mhz: frequencies must be > 0");

  double needed_channel = 0.0;
  for (const double d : cfg.d_nm) needed_channel = std::max(needed_channel, d);
  for (const double x : cfg.x_nm) needed_channel = std::max(needed_channel, x);
  if (!cfg.loops_d.empty())
    needed_channel = std::max(needed_channel, cfg.pulse.lambda_nm);
  if (needed_channel > cfg.disorder.channel_length_nm)
    problems.push_back("disorder.channel_length_nm: channel (" +
                       io::format_double(cfg.disorder.channel_length_nm) +
                       " nm) shorter than the scanned range (" +
                       io::format_double(needed_channel) + " nm)");
  return problems;
}

struct ConfigDiagnostics {
  std::vector<std::string> problems;
  std::optional<ExperimentConfig> config;  // set when problems is empty
};

inline ConfigDiagnostics validate_config_text(const std::string& text) {
  ConfigDiagnostics diag;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 0, col = 0;
    detail::line_col_of_offset(text, e.byte > 0 ? e.byte - 1 : 0, line, col);
    diag.problems.push_back("parse error at line " + std::to_string(line) +
                            ", column " + std::to_string(col) + ": " + e.what());
    return diag;
  }
  ExperimentConfig cfg;
  diag.problems = parse_config(j, cfg);
  if (diag.problems.empty()) diag.config = cfg;
  return diag;
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  auto diag = validate_config_text(text);
  if (!diag.config) {
    std::string msg = "invalid config " + path + ":";
    for (const auto& p : diag.problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return *diag.config;
}

// --- scan plans ----------------------------------------------------------------

namespace detail {

// Gaussian law of the per-shot phase integral plus the readout chain for
// one scan point; fully determined by (config, point index).
struct StZeroPointJob {
  double mean_base = 0.0;    // mean cycles, base valley component
  double mean_alt = 0.0;     // mean cycles, alternate component
  double weight_alt = 0.0;
  double sigma = 0.0;        // cycles, landscape contribution
  double sigma_static = 0.0; // cycles, static-dot shift
  int shots = 0;
  std::uint64_t seed = 0;
  SetNoiseModel noise;
  double false_singlet = 0.0, false_triplet = 0.0;

  template <typename Sink>
  void synthesize(Sink&& sink) const {
    GaussianSampler gauss(seed);
    for (int s = 0; s < shots; ++s) {
      double cycles = weight_alt > 0.0 && uniform_unit(gauss.engine()) < weight_alt
                          ? mean_alt
                          : mean_base;
      if (sigma > 0.0) cycles += sigma * gauss();
      if (sigma_static > 0.0) cycles += sigma_static * gauss();
      const double c = std::cos(M_PI * cycles);
      const double p_singlet = c * c;
      bool singlet = uniform_unit(gauss.engine()) <= p_singlet;
      if (singlet && false_triplet > 0.0 && uniform_unit(gauss.engine()) < false_triplet)
        singlet = false;
      else if (!singlet && false_singlet > 0.0 &&
               uniform_unit(gauss.engine()) < false_singlet)
        singlet = true;
      const Filling truth =
          singlet ? Filling::four_electrons : Filling::three_electrons;
      sink(draw_current(truth, noise, gauss), truth);
    }
  }
};

struct StZeroPoint {
  std::vector<double> key;  // leading CSV columns
  double fit_tau_ns = 0.0;  // abscissa for the line fit
  std::size_t line_id = 0;
  StZeroPointJob job;
};

struct StZeroLine {
  std::string fit_key;  // e.g. "B=0.8T,d=140nm"
  double b_t = 0.8;
  double axis_value = 0.0;
  bool two_tone = false;
};

struct StZeroPlan {
  std::vector<std::string> csv_header;
  std::vector<StZeroPoint> points;
  std::vector<StZeroLine> lines;
};

inline StZeroPointJob make_job(const ExperimentConfig& cfg, const Trajectory& traj,
                               double b_t, std::uint64_t point_index) {
  const PhaseLaw law = phase_law(traj, cfg.disorder, b_t);
  StZeroPointJob job;
  job.mean_base = law.mean_cycles(cfg.disorder.mean_dg, cfg.disorder.mean_hf_nev);
  job.mean_alt = cfg.spin.valley.weight_alt > 0.0
                     ? law.mean_cycles(cfg.spin.valley.mean_dg_alt,
                                       cfg.disorder.mean_hf_nev)
                     : job.mean_base;
  job.weight_alt = cfg.spin.valley.weight_alt;
  job.sigma = law.sigma_cycles();
  job.sigma_static =
      cfg.spin.t2l_static_ns > 0.0
          ? sigma_nu_hz_from_t2_s(cfg.spin.t2l_static_ns * units::ns_to_s) *
                law.total_time_s
          : 0.0;
  job.shots = cfg.shots_per_point;
  job.seed = mix_seed(cfg.master_seed, 0xA0000000ULL + point_index);
  job.noise = cfg.readout.noise;
  job.false_singlet = cfg.readout.false_singlet;
  job.false_triplet = cfg.readout.false_triplet;
  return job;
}

inline StZeroPlan build_st0_plan(const ExperimentConfig& cfg) {
  StZeroPlan plan;
  const double v_max = cfg.pulse.v_max_mps();
  auto base_request = [&](double b_t) {
    ScheduleRequest req;
    req.magnetic_field_t = b_t;
    req.lambda_nm = cfg.pulse.lambda_nm;
    req.u_lower_v = cfg.pulse.u_lower_v;
    req.crosstalk_compensation = cfg.pulse.crosstalk_compensation;
    req.max_frequency_hz = cfg.pulse.max_frequency_hz;
    req.usable_range_nm = cfg.pulse.usable_range_nm;
    return req;
  };
  std::uint64_t point_index = 0;

  switch (cfg.experiment) {
    case ExperimentKind::st0_dqd: {
      plan.csv_header = {"d_nm", "tau_ns", "P_S", "stderr"};
      const double b_t = cfg.magnetic_fields_t.front();
      plan.lines.push_back(
          {"B=" + io::format_double(b_t) + "T,d=0nm", b_t, 0.0, false});
      for (const double tau : cfg.tau_dqd_ns) {
        ScheduleRequest req = base_request(b_t);
        req.tau_dqd_ns = tau;
        const Trajectory traj = trajectory_of(build_schedule(req));
        StZeroPoint pt;
        pt.key = {0.0, tau};
        pt.fit_tau_ns = tau;
        pt.line_id = 0;
        pt.job = make_job(cfg, traj, b_t, point_index++);
        plan.points.push_back(std::move(pt));
      }
      break;
    }
    case ExperimentKind::coherent_shuttle_map: {
      const bool multi_b = cfg.magnetic_fields_t.size() > 1;
      plan.csv_header =
          multi_b ? std::vector<std::string>{"b_t", "d_nm", "tau_ns", "P_S", "stderr"}
                  : std::vector<std::string>{"d_nm", "tau_ns", "P_S", "stderr"};
      for (const double b_t : cfg.magnetic_fields_t) {
        for (const double d : cfg.d_nm) {
          const std::size_t line_id = plan.lines.size();
          plan.lines.push_back({"B=" + io::format_double(b_t) + "T,d=" +
                                    io::format_double(d) + "nm",
                                b_t, d, true});
          for (const double tau : cfg.tau_s_ns) {
            if (d > 0.0 && tau < 2.0 * d / v_max * (1.0 - 1e-12))
              continue;  // inaccessible: would need v above the maximum
            ScheduleRequest req = base_request(b_t);
            req.distance_nm = d;
            req.shuttle_time_ns = d > 0.0 ? tau : 0.0;
            if (d == 0.0) req.tau_dqd_ns = tau;
            const Trajectory traj = trajectory_of(build_schedule(req));
            StZeroPoint pt;
            pt.key = multi_b ? std::vector<double>{b_t, d, tau}
                             : std::vector<double>{d, tau};
            pt.fit_tau_ns = tau;
            pt.line_id = line_id;
            pt.job = make_job(cfg, traj, b_t, point_index++);
            plan.points.push_back(std::move(pt));
          }
        }
      }
      break;
    }
    case ExperimentKind::wait_map: {
      plan.csv_header = {"x_nm", "tau_w_ns", "P_S", "stderr"};
      const double b_t = cfg.magnetic_fields_t.front();
      for (const double x : cfg.x_nm) {
        const std::size_t line_id = plan.lines.size();
        plan.lines.push_back({"B=" + io::format_double(b_t) + "T,x=" +
                                  io::format_double(x) + "nm",
                              b_t, x, false});
        for (const double tw : cfg.tau_w_ns) {
          ScheduleRequest req = base_request(b_t);
          req.wait_at_x_nm = x;
          req.wait_at_ns = tw;
          const Trajectory traj = trajectory_of(build_schedule(req));
          StZeroPoint pt;
          pt.key = {x, tw};
          pt.fit_tau_ns = tw;
          pt.line_id = line_id;
          pt.job = make_job(cfg, traj, b_t, point_index++);
          plan.points.push_back(std::move(pt));
        }
      }
      break;
    }
    case ExperimentKind::long_distance: {
      plan.csv_header = {"loops_D", "tau_s_dqd_ns", "P_S", "stderr"};
      const double b_t = cfg.magnetic_fields_t.front();
      for (const int loops : cfg.loops_d) {
        const std::size_t line_id = plan.lines.size();
        plan.lines.push_back({"B=" + io::format_double(b_t) + "T,D=" +
                                  std::to_string(loops),
                              b_t, static_cast<double>(loops), false});
        const double shuttle_ns = static_cast<double>(loops) * cfg.pulse.lambda_nm /
                                  cfg.pulse.v_max_mps();
        for (const double tau : cfg.tau_dqd_ns) {
          ScheduleRequest req = base_request(b_t);
          req.loops = loops;
          req.tau_dqd_ns = tau;
          const Trajectory traj = trajectory_of(build_schedule(req));
          StZeroPoint pt;
          pt.key = {static_cast<double>(loops), shuttle_ns + tau};
          pt.fit_tau_ns = tau;
          pt.line_id = line_id;
          pt.job = make_job(cfg, traj, b_t, point_index++);
          plan.points.push_back(std::move(pt));
        }
      }
      break;
    }
    case ExperimentKind::charge_fidelity_scan:
      throw std::logic_error("build_st0_plan: charge scan handled separately");
  }
  return plan;
}

inline double analytic_threshold(const SetNoiseModel& noise) {
  GaussComponent g3{1.0 / noise.sigma3, noise.mu3, noise.sigma3};
  GaussComponent g4{1.0 / noise.sigma4, noise.mu4, noise.sigma4};
  return gaussian_crossing(g3, g4);
}

inline void parallel_over(std::size_t n, int jobs,
                          const std::function<void(std::size_t)>& work) {
  jobs = std::max(jobs, 1);
  if (jobs == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      work(i);
    }
  };
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

// Per-cycle charge-shuttle synthesis (forward + return measurement).
inline std::vector<ShotRecord> synthesize_charge_point(const ExperimentConfig& cfg,
                                                       double leg_success,
                                                       std::uint64_t point_index) {
  GaussianSampler gauss(mix_seed(cfg.master_seed, 0xC0000000ULL + point_index));
  std::vector<ShotRecord> shots;
  shots.reserve(2 * static_cast<std::size_t>(cfg.shots_per_point));
  for (int c = 0; c < cfg.shots_per_point; ++c) {
    const bool left = uniform_unit(gauss.engine()) <= leg_success;
    const bool returned = left && uniform_unit(gauss.engine()) <= leg_success;
    const Filling truth_fwd =
        left ? Filling::three_electrons : Filling::four_electrons;
    const Filling truth_ret =
        left ? (returned ? Filling::four_electrons : Filling::three_electrons)
             : Filling::four_electrons;
    ShotRecord fwd;
    fwd.stage = MeasureStage::m_after_forward;
    fwd.cycle_index = static_cast<std::uint64_t>(c);
    fwd.truth = truth_fwd;
    fwd.i_set = draw_current(truth_fwd, cfg.readout.noise, gauss);
    ShotRecord ret;
    ret.stage = MeasureStage::m_after_return;
    ret.cycle_index = static_cast<std::uint64_t>(c);
    ret.truth = truth_ret;
    ret.i_set = draw_current(truth_ret, cfg.readout.noise, gauss);
    shots.push_back(fwd);
    shots.push_back(ret);
  }
  return shots;
}

// Threshold resolution shared by both pipelines. The calibration sample is
// a deterministic stride subsample of the synthesized currents.
inline double resolve_threshold(const ExperimentConfig& cfg,
                                const std::vector<double>& calibration,
                                nlohmann::json& report) {
  if (cfg.readout.threshold_mode == "fixed") {
    report = {{"mode", "fixed"}, {"threshold", cfg.readout.fixed_threshold}};
    return cfg.readout.fixed_threshold;
  }
  if (cfg.readout.threshold_mode == "analytic") {
    const double thr = analytic_threshold(cfg.readout.noise);
    report = {{"mode", "analytic"}, {"threshold", thr}};
    return thr;
  }
  std::vector<ShotRecord> calib(calibration.size());
  for (std::size_t i = 0; i < calibration.size(); ++i) calib[i].i_set = calibration[i];
  try {
    const SetHistogram hist = fit_threshold(calib);
    report = {{"mode", "fitted"},
              {"threshold", hist.threshold},
              {"lower",
               {{"amplitude", hist.lower.amplitude},
                {"mean", hist.lower.mean},
                {"sigma", hist.lower.sigma}}},
              {"upper",
               {{"amplitude", hist.upper.amplitude},
                {"mean", hist.upper.mean},
                {"sigma", hist.upper.sigma}}},
              {"n_calibration_shots", calib.size()}};
    return hist.threshold;
  } catch (const std::exception& e) {
    const double thr = analytic_threshold(cfg.readout.noise);
    report = {{"mode", "analytic_fallback"}, {"threshold", thr}, {"reason", e.what()}};
    return thr;
  }
}

// Line fits for the ST0 experiments; shared by run and report.
inline nlohmann::json fit_st0_lines(const ExperimentConfig& cfg, const StZeroPlan& plan,
                                    const std::vector<ScanData>& line_data,
                                    nlohmann::json& fits) {
  nlohmann::json line_fits = nlohmann::json::object();
  for (std::size_t l = 0; l < plan.lines.size(); ++l) {
    const auto& line = plan.lines[l];
    ScanData dat = line_data[l];
    std::sort(dat.begin(), dat.end(),
              [](const ScanPoint& a, const ScanPoint& b) { return a.tau_ns < b.tau_ns; });
    nlohmann::json entry;
    entry["b_t"] = line.b_t;
    entry["axis_value"] = line.axis_value;
    if (dat.size() < 16) {
      entry["skipped"] = true;
      entry["reason"] = "fewer than 16 scan points in line";
    } else {
      try {
        if (line.two_tone) {
          const St0TwoToneFit fit = fit_two_tone(dat);
          entry["model"] =
              fit.single_tone_fallback ? "single_tone_fallback" : "two_tone";
          entry["t2_star_ns"] = fit.t2_star_ns;
          entry["t2_star_err_ns"] = fit.t2_star_err_ns;
          entry["nu_lt_mhz"] = fit.lt.nu_mhz;
          entry["nu_lt_err_mhz"] = fit.lt.nu_err_mhz;
          entry["a_lt"] = fit.lt.a;
          entry["phi_lt_rad"] = fit.lt.phi_rad;
          entry["nu_gt_mhz"] = fit.gt.nu_mhz;
          entry["nu_gt_err_mhz"] = fit.gt.nu_err_mhz;
          entry["a_gt"] = fit.gt.a;
          entry["phi_gt_rad"] = fit.gt.phi_rad;
          entry["c"] = fit.c;
          entry["residual_rms"] = fit.residual_rms;
        } else {
          const St0SingleToneFit fit = fit_single_tone(dat);
          entry["model"] = "single_tone";
          entry["t2_star_ns"] = fit.t2_star_ns;
          entry["t2_star_err_ns"] = fit.t2_star_err_ns;
          entry["nu_mhz"] = fit.tone.nu_mhz;
          entry["nu_err_mhz"] = fit.tone.nu_err_mhz;
          entry["a"] = fit.tone.a;
          entry["phi_rad"] = fit.tone.phi_rad;
          entry["c"] = fit.c;
          entry["residual_rms"] = fit.residual_rms;
        }
      } catch (const std::exception& e) {
        throw FitError("fit failed for line " + line.fit_key + ": " + e.what());
      }
    }
    line_fits[line.fit_key] = entry;
  }
  fits["lines"] = line_fits;

  if (cfg.experiment == ExperimentKind::coherent_shuttle_map &&
      cfg.magnetic_fields_t.size() == 2) {
    const double b_num = std::min(cfg.magnetic_fields_t[0], cfg.magnetic_fields_t[1]);
    const double b_den = std::max(cfg.magnetic_fields_t[0], cfg.magnetic_fields_t[1]);
    auto collect = [&](double b_t, bool upper_tone) {
      std::vector<FrequencyPoint> pts;
      for (const auto& line : plan.lines) {
        if (line.b_t != b_t) continue;
        const auto& entry = fits["lines"][line.fit_key];
        if (entry.contains("skipped")) continue;
        FrequencyPoint fp;
        fp.d_nm = line.axis_value;
        fp.nu_mhz = entry.at(upper_tone ? "nu_gt_mhz" : "nu_lt_mhz").get<double>();
        fp.err_mhz =
            entry.at(upper_tone ? "nu_gt_err_mhz" : "nu_lt_err_mhz").get<double>();
        pts.push_back(fp);
      }
      return pts;
    };
    nlohmann::json ratios = nlohmann::json::array();
    for (const bool upper : {false, true}) {
      const auto num = collect(b_num, upper);
      const auto den = collect(b_den, upper);
      if (num.size() == den.size() && !num.empty())
        for (const auto& r : frequency_ratio_report(num, den))
          ratios.push_back({{"tone", upper ? "gt" : "lt"},
                            {"d_nm", r.d_nm},
                            {"ratio", r.ratio},
                            {"err", r.err}});
    }
    fits["frequency_ratios"] = ratios;
    fits["ratio_fields_t"] = {b_num, b_den};
  }
  return fits;
}

}  // namespace detail

// --- run -------------------------------------------------------------------------

struct RunOptions {
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> out_override;
  int jobs = 1;
};

struct RunArtifacts {
  std::filesystem::path directory;
  std::filesystem::path data_csv;
  std::filesystem::path fits_json;
  std::filesystem::path manifest_json;
};

namespace detail {

inline RunArtifacts bundle_paths(const ExperimentConfig& cfg) {
  RunArtifacts art;
  art.directory =
      std::filesystem::path(cfg.output_dir) / to_string(cfg.experiment) / cfg.label;
  art.data_csv = art.directory / "data.csv";
  art.fits_json = art.directory / "fits.json";
  art.manifest_json = art.directory / "manifest.json";
  return art;
}

inline void write_bundle(const ExperimentConfig& cfg, const RunArtifacts& art,
                         const io::CsvTable& data, const nlohmann::json& fits) {
  try {
    io::write_file(art.data_csv.string(), io::to_csv(data));
    io::write_file(art.fits_json.string(), fits.dump(2) + "\n");
    nlohmann::json manifest;
    manifest["experiment"] = to_string(cfg.experiment);
    manifest["label"] = cfg.label;
    manifest["master_seed"] = cfg.master_seed;
    manifest["config"] = config_echo(cfg);
    nlohmann::json files = nlohmann::json::array();
    for (const auto& p : {art.data_csv, art.fits_json})
      files.push_back({{"path", p.filename().string()},
                       {"fnv1a64", io::fnv1a_hex(io::read_file(p.string()))}});
    manifest["files"] = files;
    io::write_file(art.manifest_json.string(), manifest.dump(2) + "\n");
  } catch (const FitError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
}

}  // namespace detail

inline RunArtifacts run_experiment(const ExperimentConfig& config_in,
                                   const RunOptions& options = {}) {
  ExperimentConfig cfg = config_in;
  if (options.seed_override) cfg.master_seed = *options.seed_override;
  if (options.out_override) cfg.output_dir = *options.out_override;

  RunArtifacts art = detail::bundle_paths(cfg);
  std::error_code ec;
  std::filesystem::create_directories(art.directory, ec);
  if (ec) throw IoError("cannot create output directory " + art.directory.string());

  io::CsvTable data;
  nlohmann::json fits = nlohmann::json::object();

  if (cfg.experiment == ExperimentKind::charge_fidelity_scan) {
    const bool scan_u = !cfg.u_lower_mv.empty();
    const auto& axis = scan_u ? cfg.u_lower_mv : cfg.f_mhz;
    data.header = {scan_u ? "u_lower_mv" : "f_mhz", "fidelity", "wilson_lo",
                   "wilson_hi", "n_cycles"};

    auto leg_success_at = [&](std::size_t i) {
      return cfg.charge.success(scan_u ? axis[i] : cfg.pulse.u_lower_v * 1e3);
    };

    // pass 1: calibration subsample
    const std::size_t total =
        2 * axis.size() * static_cast<std::size_t>(cfg.shots_per_point);
    const std::size_t stride = std::max<std::size_t>(1, total / 100000);
    std::vector<std::vector<double>> calib_per_point(axis.size());
    detail::parallel_over(axis.size(), options.jobs, [&](std::size_t i) {
      const auto shots = detail::synthesize_charge_point(cfg, leg_success_at(i), i);
      for (std::size_t s = 0; s < shots.size(); s += stride)
        calib_per_point[i].push_back(shots[s].i_set);
    });
    std::vector<double> calibration;
    for (const auto& c : calib_per_point)
      calibration.insert(calibration.end(), c.begin(), c.end());

    nlohmann::json threshold_report;
    const double threshold = detail::resolve_threshold(cfg, calibration, threshold_report);
    fits["threshold"] = threshold_report;

    // pass 2: classify and count
    std::vector<FidelityResult> results(axis.size());
    detail::parallel_over(axis.size(), options.jobs, [&](std::size_t i) {
      const auto shots = detail::synthesize_charge_point(cfg, leg_success_at(i), i);
      results[i] = charge_fidelity(shots, threshold, cfg.readout.four_is_upper);
    });

    nlohmann::json fidelity_entries = nlohmann::json::array();
    for (std::size_t i = 0; i < axis.size(); ++i) {
      const auto& fc = results[i];
      data.rows.push_back({axis[i], fc.fidelity, fc.wilson_lo, fc.wilson_hi,
                           static_cast<double>(fc.n_cycles)});
      fidelity_entries.push_back({{scan_u ? "u_lower_mv" : "f_mhz", axis[i]},
                                  {"fidelity", fc.fidelity},
                                  {"wilson_lo", fc.wilson_lo},
                                  {"wilson_hi", fc.wilson_hi},
                                  {"n_cycles", fc.n_cycles},
                                  {"n_success", fc.n_success}});
    }
    fits["charge_fidelity"] = fidelity_entries;
  } else {
    const detail::StZeroPlan plan = detail::build_st0_plan(cfg);
    data.header = plan.csv_header;

    // pass 1: calibration subsample
    const std::size_t total =
        plan.points.size() * static_cast<std::size_t>(cfg.shots_per_point);
    const std::size_t stride = std::max<std::size_t>(1, total / 100000);
    std::vector<std::vector<double>> calib_per_point(plan.points.size());
    detail::parallel_over(plan.points.size(), options.jobs, [&](std::size_t i) {
      std::size_t k = 0;
      plan.points[i].job.synthesize([&](double current, Filling) {
        if (k++ % stride == 0) calib_per_point[i].push_back(current);
      });
    });
    std::vector<double> calibration;
    for (const auto& c : calib_per_point)
      calibration.insert(calibration.end(), c.begin(), c.end());

    nlohmann::json threshold_report;
    const double threshold = detail::resolve_threshold(cfg, calibration, threshold_report);
    fits["threshold"] = threshold_report;

    // pass 2: classify
    std::vector<SingletFraction> fractions(plan.points.size());
    detail::parallel_over(plan.points.size(), options.jobs, [&](std::size_t i) {
      std::vector<ShotRecord> shots;
      shots.reserve(static_cast<std::size_t>(cfg.shots_per_point));
      plan.points[i].job.synthesize([&](double current, Filling truth) {
        ShotRecord r;
        r.i_set = current;
        r.truth = truth;
        r.cycle_index = shots.size();
        shots.push_back(r);
      });
      fractions[i] = singlet_fraction(shots, threshold, cfg.readout.four_is_upper);
    });

    std::vector<ScanData> line_data(plan.lines.size());
    for (std::size_t i = 0; i < plan.points.size(); ++i) {
      const auto& frac = fractions[i];
      std::vector<double> row = plan.points[i].key;
      row.push_back(frac.p_s);
      row.push_back(frac.stderr_p);
      data.rows.push_back(row);

      ScanPoint sp;
      sp.tau_ns = plan.points[i].fit_tau_ns;
      sp.p_s = frac.p_s;
      const double n = static_cast<double>(frac.n_shots);
      sp.stderr_p = std::sqrt((frac.p_s * (1.0 - frac.p_s) + 1.0 / n) / n);
      line_data[plan.points[i].line_id].push_back(sp);
    }

    detail::fit_st0_lines(cfg, plan, line_data, fits);
  }

  detail::write_bundle(cfg, art, data, fits);
  return art;
}

// Re-runs the fitting stage on an existing bundle's data.csv (the scan
// plan is reconstructed from the config, so rows must match the original
// run's grid) and rewrites fits.json and the manifest.
inline RunArtifacts report_experiment(const ExperimentConfig& config_in,
                                      const RunOptions& options = {}) {
  ExperimentConfig cfg = config_in;
  if (options.seed_override) cfg.master_seed = *options.seed_override;
  if (options.out_override) cfg.output_dir = *options.out_override;

  RunArtifacts art = detail::bundle_paths(cfg);
  io::CsvTable data;
  try {
    data = io::parse_csv(io::read_file(art.data_csv.string()));
  } catch (const std::exception& e) {
    throw IoError(std::string("report: ") + e.what());
  }
  nlohmann::json fits = nlohmann::json::object();

  if (cfg.experiment == ExperimentKind::charge_fidelity_scan) {
    // re-derive the Wilson intervals from the recorded counts
    nlohmann::json fidelity_entries = nlohmann::json::array();
    io::CsvTable out;
    out.header = data.header;
    for (const auto& row : data.rows) {
      if (row.size() != 5) throw IoError("report: malformed charge data.csv row");
      const double axis = row[0];
      const auto n = static_cast<std::uint64_t>(row[4]);
      const auto k = static_cast<std::uint64_t>(std::llround(row[1] * row[4]));
      const auto [lo, hi] = wilson_interval(k, n);
      out.rows.push_back({axis, row[1], lo, hi, row[4]});
      fidelity_entries.push_back({{data.header.front(), axis},
                                  {"fidelity", row[1]},
                                  {"wilson_lo", lo},
                                  {"wilson_hi", hi},
                                  {"n_cycles", n},
                                  {"n_success", k}});
    }
    fits["charge_fidelity"] = fidelity_entries;
    detail::write_bundle(cfg, art, out, fits);
    return art;
  }

  const detail::StZeroPlan plan = detail::build_st0_plan(cfg);
  if (data.rows.size() != plan.points.size())
    throw ConfigError("report: data.csv has " + std::to_string(data.rows.size()) +
                      " rows but the config's scan grid has " +
                      std::to_string(plan.points.size()) + " points");
  std::vector<ScanData> line_data(plan.lines.size());
  for (std::size_t i = 0; i < plan.points.size(); ++i) {
    const auto& row = data.rows[i];
    if (row.size() != plan.csv_header.size())
      throw IoError("report: malformed data.csv row width");
    ScanPoint sp;
    sp.tau_ns = plan.points[i].fit_tau_ns;
    sp.p_s = row[row.size() - 2];
    const double n = static_cast<double>(cfg.shots_per_point);
    sp.stderr_p = std::sqrt((sp.p_s * (1.0 - sp.p_s) + 1.0 / n) / n);
    line_data[plan.points[i].line_id].push_back(sp);
  }
  detail::fit_st0_lines(cfg, plan, line_data, fits);
  detail::write_bundle(cfg, art, data, fits);
  return art;
}

}  // namespace shuttlesim
