#pragma once

// Two-level (S, T0) dynamics of the separated EPR pair along a trajectory
// through a Zeeman landscape,
//   H = [ -J(eps)   delta/2 ]      delta(x) = dg(x) mu_B B + E_hf(x),
//       [ delta/2      0    ]
// together with the closed-form dephasing models (position-averaged
// frequency, motional-narrowing T2*, shuttle phase infidelity) and the
// Monte Carlo over quasistatic disorder realizations.
//
// Evolution applies exact 2x2 step propagators with H sampled at the
// trajectory midpoint of each step; with J = 0 all steps commute and the
// accumulated phase reduces to the time integral of delta along the path,
// which the fast ensemble routines exploit.

#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <thread>
#include <vector>

#include "shuttlesim/constants.hpp"
#include "shuttlesim/landscape.hpp"
#include "shuttlesim/pulse.hpp"
#include "shuttlesim/random.hpp"

namespace shuttlesim {

struct TwoLevelState {
  std::complex<double> amp_s{1.0, 0.0};
  std::complex<double> amp_t0{0.0, 0.0};

  static TwoLevelState singlet() { return {}; }

  double norm() const { return std::norm(amp_s) + std::norm(amp_t0); }
};

inline double singlet_probability(const TwoLevelState& state) {
  return std::norm(state.amp_s);
}

struct ExchangeModel {
  enum class Form { off_during_shuttle, exponential_in_detuning };
  Form form = Form::off_during_shuttle;
  double j0_nev = 0.0;
  double epsilon0_v = 1.0;
  double detuning_v = 0.0;

  // J in eV during the coherent window. The barrier is pinched off while
  // shuttling, so the default form is identically zero there.
  double j_ev() const {
    if (form == Form::off_during_shuttle) return 0.0;
    const double j = j0_nev * std::exp(detuning_v / epsilon0_v) * units::nev_to_ev;
    if (j < 0.0) throw std::invalid_argument("ExchangeModel: J must be >= 0");
    return j;
  }
};

namespace detail {

// Exact propagator for constant H = c0*I + cx*sx + cz*sz over dt.
inline void apply_step(TwoLevelState& state, double delta_ev, double j_ev, double dt_s) {
  const double hbar = PhysicalConstants::hbar_ev_s();
  const double cx = 0.5 * delta_ev;
  const double cz = -0.5 * j_ev;
  const double c0 = -0.5 * j_ev;
  const double omega = std::sqrt(cx * cx + cz * cz);
  const double theta = omega * dt_s / hbar;
  const std::complex<double> global = std::polar(1.0, -c0 * dt_s / hbar);

  double nx = 0.0, nz = 0.0;
  if (omega > 0.0) {
    nx = cx / omega;
    nz = cz / omega;
  }
  const double ct = std::cos(theta);
  const double st = std::sin(theta);
  const std::complex<double> i_unit(0.0, 1.0);
  const std::complex<double> a = state.amp_s;
  const std::complex<double> b = state.amp_t0;
  state.amp_s = global * ((ct - i_unit * nz * st) * a - i_unit * nx * st * b);
  state.amp_t0 = global * (-i_unit * nx * st * a + (ct + i_unit * nz * st) * b);
}

}  // namespace detail

// Time-ordered evolution along the trajectory with midpoint-sampled H.
// dt_s is the maximum step; each step must advance the Bloch phase by less
// than max_phase_rad (default contract: 0.05 rad), otherwise the call is a
// step-size violation. extra_delta_ev models realization-level frequency
// offsets (static-dot shift, valley component) on top of the landscape.
inline TwoLevelState evolve(TwoLevelState state, const Trajectory& traj,
                            const ZeemanLandscape& landscape, double b_t,
                            const ExchangeModel& exchange, double dt_s,
                            double extra_delta_ev = 0.0,
                            double max_phase_rad = 0.05) {
  if (dt_s <= 0.0) throw std::invalid_argument("evolve: dt must be > 0");
  const double hbar = PhysicalConstants::hbar_ev_s();
  for (std::size_t seg = 1; seg < traj.samples.size(); ++seg) {
    const auto& a = traj.samples[seg - 1];
    const auto& b = traj.samples[seg];
    const double span = b.t_s - a.t_s;
    if (span <= 0.0) continue;
    const auto n_steps = static_cast<std::size_t>(std::ceil(span / dt_s - 1e-12));
    const double h = span / static_cast<double>(std::max<std::size_t>(n_steps, 1));
    for (std::size_t k = 0; k < std::max<std::size_t>(n_steps, 1); ++k) {
      const double t_mid = a.t_s + (static_cast<double>(k) + 0.5) * h;
      const double w = (t_mid - a.t_s) / span;
      const double x_mid = a.x_nm + w * (b.x_nm - a.x_nm);
      const auto field = landscape.field_at(x_mid);
      const double delta_ev = zeeman_energy_ev(field.dg, b_t) +
                              field.hf_nev * units::nev_to_ev + extra_delta_ev;
      const double j_ev = exchange.j_ev();
      const double omega = 0.5 * std::hypot(delta_ev, j_ev);
      if (omega * h / hbar > max_phase_rad)
        throw std::invalid_argument(
            "evolve: step-size violation, phase per step exceeds bound");
      detail::apply_step(state, delta_ev, j_ev, h);
    }
  }
  return state;
}

// Largest step obeying the phase-per-step contract for this landscape.
inline double stable_dt_s(const ZeemanLandscape& landscape, double b_t,
                          double extra_delta_ev = 0.0, double j_ev = 0.0,
                          double max_phase_rad = 0.04) {
  double delta_max = 0.0;
  for (std::size_t i = 0; i < landscape.size(); ++i) {
    const double d = std::abs(zeeman_energy_ev(landscape.dg_values[i], b_t) +
                              landscape.hf_values_nev[i] * units::nev_to_ev) +
                     std::abs(extra_delta_ev);
    delta_max = std::max(delta_max, d);
  }
  const double omega = 0.5 * std::hypot(delta_max, j_ev);
  if (omega <= 0.0) return 1e-9;
  return max_phase_rad * PhysicalConstants::hbar_ev_s() / omega;
}

// Position-averaged ST0 frequency over the first d nm of the channel
// (MHz). d = 0 uses the point value at x = 0.
inline double avg_frequency_mhz(const ZeemanLandscape& landscape, double d_nm,
                                double b_t) {
  const auto win = landscape.window_average(0.0, d_nm);
  const double delta_ev =
      zeeman_energy_ev(win.dg, b_t) + win.hf_nev * units::nev_to_ev;
  return frequency_hz_from_energy_ev(delta_ev) * units::hz_to_mhz;
}

// --- closed-form dephasing models -------------------------------------------

struct DephasingModelParams {
  double t2l_ns = 1110.0;  // static three-electron dot
  double t2r_ns = 520.0;   // right dot at rest
  double lc_nm = 13.0;

  void validate() const {
    if (t2l_ns <= 0.0 || t2r_ns <= 0.0 || lc_nm <= 0.0)
      throw std::invalid_argument("DephasingModelParams: all fields must be > 0");
  }
};

// EPR-pair dephasing time with motional narrowing of the shuttled spin:
// (1/T2*)^2 = (1/T2L)^2 + (1/T2R)^2 * lc / (d + lc).
inline double t2_epr_model_ns(const DephasingModelParams& p, double d_nm) {
  p.validate();
  if (d_nm < 0.0) throw std::invalid_argument("t2_epr_model: d must be >= 0");
  const double inv2 = 1.0 / (p.t2l_ns * p.t2l_ns) +
                      1.0 / (p.t2r_ns * p.t2r_ns) * p.lc_nm / (d_nm + p.lc_nm);
  return 1.0 / std::sqrt(inv2);
}

// Dephasing time of the shuttled spin alone: T2R * sqrt((d + lc) / lc).
inline double t2_shuttled_ns(const DephasingModelParams& p, double d_nm) {
  p.validate();
  if (d_nm < 0.0) throw std::invalid_argument("t2_shuttled: d must be >= 0");
  return p.t2r_ns * std::sqrt((d_nm + p.lc_nm) / p.lc_nm);
}

struct ShuttleInfidelity {
  double tau_s_ns = 0.0;
  double exact = 0.0;      // 1 - exp(-(tau_S/T2S)^2)
  double quadratic = 0.0;  // (2d / (T2S v_S))^2
};

// Phase infidelity of a forward+backward shuttle over one-way distance d
// at velocity v (total time tau_S = 2d/v).
inline ShuttleInfidelity shuttle_infidelity(double t2s_ns, double d_nm,
                                            double v_mps) {
  if (t2s_ns <= 0.0 || d_nm < 0.0 || v_mps <= 0.0)
    throw std::invalid_argument("shuttle_infidelity: inputs must be positive");
  ShuttleInfidelity out;
  out.tau_s_ns = 2.0 * d_nm / v_mps;  // 1 m/s == 1 nm/ns
  const double ratio = out.tau_s_ns / t2s_ns;
  out.quadratic = ratio * ratio;
  out.exact = -std::expm1(-ratio * ratio);
  return out;
}

// --- quasistatic phase statistics (fast ensemble path) -----------------------

// Seconds spent at each landscape grid node, hat-function weighted, so that
// sum_i w_i * f_i equals the time integral of the interpolated field along
// the trajectory. Valid for piecewise-linear x(t) on the uniform grid.
inline std::vector<double> dwell_weights(const Trajectory& traj,
                                         const ZeemanLandscape& landscape) {
  const double dx = landscape.spec.grid_step_nm;
  const std::size_t n = landscape.size();
  std::vector<double> w(n, 0.0);

  auto deposit_point = [&](double x_nm, double seconds) {
    const double u = std::clamp(x_nm, 0.0, landscape.span_nm()) / dx;
    const auto i = std::min(static_cast<std::size_t>(u), n - 2);
    const double frac = u - static_cast<double>(i);
    w[i] += seconds * (1.0 - frac);
    w[i + 1] += seconds * frac;
  };

  for (std::size_t seg = 1; seg < traj.samples.size(); ++seg) {
    const auto& a = traj.samples[seg - 1];
    const auto& b = traj.samples[seg];
    const double dt = b.t_s - a.t_s;
    if (dt <= 0.0) continue;
    if (a.x_nm == b.x_nm) {
      deposit_point(a.x_nm, dt);
      continue;
    }
    if (a.x_nm < -1e-9 || b.x_nm < -1e-9 ||
        std::max(a.x_nm, b.x_nm) > landscape.span_nm() + 1e-9)
      throw std::out_of_range("dwell_weights: trajectory outside landscape");
    const double lo = std::min(a.x_nm, b.x_nm);
    const double hi = std::max(a.x_nm, b.x_nm);
    const double inv_speed = dt / (hi - lo);  // s per nm
    auto cell = static_cast<std::size_t>(std::clamp(lo, 0.0, landscape.span_nm()) / dx);
    cell = std::min(cell, n - 2);
    for (; cell < n - 1; ++cell) {
      const double cell_lo = static_cast<double>(cell) * dx;
      const double cell_hi = cell_lo + dx;
      const double p = std::max(lo, cell_lo);
      const double q = std::min(hi, cell_hi);
      if (q <= p) break;
      const double up = (p - cell_lo) / dx;
      const double uq = (q - cell_lo) / dx;
      const double full = uq - up;
      const double upper = 0.5 * (uq * uq - up * up);
      w[cell] += inv_speed * dx * (full - upper);
      w[cell + 1] += inv_speed * dx * upper;
      if (q >= hi) break;
    }
  }
  return w;
}

// Gaussian law of the phase integral I = integral of nu(x(t)) dt (in
// cycles) for a quasistatic disorder realization. Both disorder fields
// share the correlation kernel, so one quadratic form w^T K w covers them.
struct PhaseLaw {
  double total_time_s = 0.0;
  double sigma_unit_s = 0.0;   // std of the time integral of a unit field
  double sigma_delta_ev = 0.0; // pointwise energy spread of the landscape
  double b_t = 0.8;

  double mean_cycles(double mean_dg, double mean_hf_nev) const {
    const double delta_ev =
        zeeman_energy_ev(mean_dg, b_t) + mean_hf_nev * units::nev_to_ev;
    return frequency_hz_from_energy_ev(delta_ev) * total_time_s;
  }

  double sigma_cycles() const {
    return sigma_delta_ev / PhysicalConstants::h_ev_s * sigma_unit_s;
  }
};

inline PhaseLaw phase_law(const Trajectory& traj, const DisorderSpec& spec,
                          double b_t) {
  spec.validate();
  if (traj.max_x_nm() > spec.channel_length_nm + 1e-9)
    throw std::out_of_range("phase_law: trajectory outside channel");

  // weights need only the grid geometry; a zero-sigma landscape carries it
  DisorderSpec geom = spec;
  geom.sigma_dg = 0.0;
  geom.sigma_hf_nev = 0.0;
  const ZeemanLandscape grid = generate_landscape(geom);
  const std::vector<double> w = dwell_weights(traj, grid);

  // w^T K w with the kernel truncated where it underflows
  const double dx_over_lc = spec.grid_step_nm / spec.correlation_length_nm;
  std::size_t lag_max = 0;
  while (kernel_value(spec.kernel, static_cast<double>(lag_max + 1) * dx_over_lc) >
             1e-18 &&
         lag_max + 1 < w.size())
    ++lag_max;
  double quad = 0.0;
  for (const double wi : w) quad += wi * wi;
  for (std::size_t lag = 1; lag <= lag_max; ++lag) {
    double acc = 0.0;
    for (std::size_t i = 0; i + lag < w.size(); ++i) acc += w[i] * w[i + lag];
    quad += 2.0 * kernel_value(spec.kernel, static_cast<double>(lag) * dx_over_lc) * acc;
  }

  PhaseLaw law;
  law.total_time_s = traj.total_time_s();
  law.sigma_unit_s = std::sqrt(std::max(quad, 0.0));
  const double sz = spec.sigma_dg * PhysicalConstants::mu_b_ev_per_t * b_t;
  const double sh = spec.sigma_hf_nev * units::nev_to_ev;
  law.sigma_delta_ev = std::hypot(sz, sh);
  law.b_t = b_t;
  return law;
}

// --- Monte Carlo -------------------------------------------------------------

struct ValleyMixing {
  double weight_alt = 0.0;   // probability of drawing the second component
  double mean_dg_alt = 0.0;
};

struct MonteCarloOptions {
  int n_realizations = 1000;
  double t2l_static_ns = 0.0;  // 0 disables the static-dot quasistatic shift
  ValleyMixing valley;
  ExchangeModel exchange;
  double dt_s = 0.0;           // 0 selects stable_dt_s per realization
  int jobs = 1;
};

struct MonteCarloResult {
  double mean_p_s = 0.0;
  double stderr_p = 0.0;
  int n_realizations = 0;
};

namespace detail {

// Realization-level frequency offset (valley component + static dot),
// deterministic in (seed, realization index).
inline double realization_extra_delta_ev(const MonteCarloOptions& opt,
                                         const DisorderSpec& spec, double b_t,
                                         std::uint64_t realization) {
  double extra = 0.0;
  GaussianSampler gauss(mix_seed(spec.seed, 0x5eed0000ULL + realization));
  if (opt.valley.weight_alt > 0.0) {
    const double u = uniform_unit(gauss.engine());
    if (u < opt.valley.weight_alt)
      extra += zeeman_energy_ev(opt.valley.mean_dg_alt - spec.mean_dg, b_t);
  }
  if (opt.t2l_static_ns > 0.0) {
    const double sigma_nu =
        sigma_nu_hz_from_t2_s(opt.t2l_static_ns * units::ns_to_s);
    extra += gauss() * sigma_nu * PhysicalConstants::h_ev_s;
  }
  return extra;
}

}  // namespace detail

// Averages singlet_probability over fresh landscape realizations
// (quasistatic disorder per realization). Deterministic for a fixed
// spec.seed, independent of the number of worker threads.
inline MonteCarloResult monte_carlo_ps(const PulseSchedule& schedule,
                                       const DisorderSpec& spec,
                                       const MonteCarloOptions& opt) {
  if (opt.n_realizations < 100)
    throw std::invalid_argument("monte_carlo_ps: need >= 100 realizations");
  const auto problems = schedule_problems(schedule);
  if (!problems.empty())
    throw std::invalid_argument("monte_carlo_ps: invalid schedule: " + problems.front());
  const Trajectory traj = trajectory_of(schedule);
  const double b_t = schedule.magnetic_field_t;

  std::vector<double> ps(static_cast<std::size_t>(opt.n_realizations), 0.0);
  auto run_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      DisorderSpec rspec = spec;
      rspec.seed = mix_seed(spec.seed, 1 + r);
      const ZeemanLandscape land = generate_landscape(rspec);
      const double extra = detail::realization_extra_delta_ev(opt, spec, b_t, r);
      const double dt =
          opt.dt_s > 0.0 ? opt.dt_s
                         : stable_dt_s(land, b_t, extra, opt.exchange.j_ev());
      const TwoLevelState final_state = evolve(TwoLevelState::singlet(), traj,
                                               land, b_t, opt.exchange, dt, extra);
      ps[r] = singlet_probability(final_state);
    }
  };

  const int jobs = std::max(opt.jobs, 1);
  if (jobs == 1) {
    run_range(0, ps.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (ps.size() + jobs - 1) / jobs;
    for (int j = 0; j < jobs; ++j) {
      const std::size_t begin = std::min(ps.size(), j * chunk);
      const std::size_t end = std::min(ps.size(), begin + chunk);
      if (begin < end) pool.emplace_back(run_range, begin, end);
    }
    for (auto& t : pool) t.join();
  }

  // fixed-order reduction keeps results identical across thread counts
  double sum = 0.0;
  for (const double p : ps) sum += p;
  const double mean = sum / static_cast<double>(ps.size());
  double ss = 0.0;
  for (const double p : ps) ss += (p - mean) * (p - mean);
  MonteCarloResult res;
  res.mean_p_s = mean;
  res.n_realizations = opt.n_realizations;
  res.stderr_p = ps.size() > 1
                     ? std::sqrt(ss / (static_cast<double>(ps.size()) - 1.0) /
                                 static_cast<double>(ps.size()))
                     : 0.0;
  return res;
}

inline MonteCarloResult monte_carlo_ps(const PulseSchedule& schedule,
                                       const DisorderSpec& spec,
                                       int n_realizations) {
  MonteCarloOptions opt;
  opt.n_realizations = n_realizations;
  return monte_carlo_ps(schedule, spec, opt);
}

// Ensemble ST0 curves over fresh landscape realizations: for each distance
// d the per-realization frequency is the window average nu_d (exact J = 0
// reduction of the step propagators), and P_S(tau) = cos^2(pi nu_d tau) is
// accumulated over the ensemble. Realization order is fixed, so results do
// not depend on the worker count.
struct EnsembleCurves {
  std::vector<std::vector<double>> mean_ps;    // [d][tau]
  std::vector<std::vector<double>> stderr_ps;  // [d][tau]
};

inline EnsembleCurves ensemble_st0_curves(
    const DisorderSpec& spec, const std::vector<double>& d_nm,
    const std::vector<std::vector<double>>& tau_ns_per_d, double b_t,
    int n_realizations, const MonteCarloOptions& opt = {}, int jobs = 1) {
  if (d_nm.size() != tau_ns_per_d.size())
    throw std::invalid_argument("ensemble_st0_curves: d and tau grids mismatch");
  if (n_realizations < 100)
    throw std::invalid_argument("ensemble_st0_curves: need >= 100 realizations");

  const std::size_t nd = d_nm.size();
  const auto nr = static_cast<std::size_t>(n_realizations);
  std::vector<std::vector<double>> nu_per_real(nd,
                                               std::vector<double>(nr, 0.0));
  std::vector<double> extra_nu(nr, 0.0);

  auto run_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      DisorderSpec rspec = spec;
      rspec.seed = mix_seed(spec.seed, 1 + r);
      const ZeemanLandscape land = generate_landscape(rspec);
      const double extra = detail::realization_extra_delta_ev(opt, spec, b_t, r);
      extra_nu[r] = frequency_hz_from_energy_ev(extra);
      for (std::size_t k = 0; k < nd; ++k)
        nu_per_real[k][r] = avg_frequency_mhz(land, d_nm[k], b_t) * units::mhz_to_hz;
    }
  };
  const int njobs = std::max(jobs, 1);
  if (njobs == 1) {
    run_range(0, nr);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (nr + njobs - 1) / njobs;
    for (int j = 0; j < njobs; ++j) {
      const std::size_t begin = std::min(nr, j * chunk);
      const std::size_t end = std::min(nr, begin + chunk);
      if (begin < end) pool.emplace_back(run_range, begin, end);
    }
    for (auto& t : pool) t.join();
  }

  EnsembleCurves out;
  out.mean_ps.resize(nd);
  out.stderr_ps.resize(nd);
  for (std::size_t k = 0; k < nd; ++k) {
    const auto& taus = tau_ns_per_d[k];
    out.mean_ps[k].assign(taus.size(), 0.0);
    out.stderr_ps[k].assign(taus.size(), 0.0);
    for (std::size_t it = 0; it < taus.size(); ++it) {
      const double tau_s = taus[it] * units::ns_to_s;
      double sum = 0.0, sumsq = 0.0;
      for (std::size_t r = 0; r < nr; ++r) {
        const double c = std::cos(M_PI * (nu_per_real[k][r] + extra_nu[r]) * tau_s);
        const double p = c * c;
        sum += p;
        sumsq += p * p;
      }
      const double mean = sum / static_cast<double>(nr);
      const double var =
          std::max(sumsq / static_cast<double>(nr) - mean * mean, 0.0);
      out.mean_ps[k][it] = mean;
      out.stderr_ps[k][it] =
          std::sqrt(var / static_cast<double>(nr > 1 ? nr - 1 : 1));
    }
  }
  return out;
}

}  // namespace shuttlesim
