// Two-level evolution and dephasing-model checks. Analytic limits
// (cos^2(pi nu t) at J = 0, eigenstate freezing at delta = 0) anchor the
// propagator; the quasistatic phase law and the Monte Carlo are verified
// against each other and against closed-form Gaussian averages.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "shuttlesim/analysis.hpp"
#include "shuttlesim/spinsim.hpp"

using namespace shuttlesim;

namespace {

DisorderSpec constant_spec(double mean_dg) {
  DisorderSpec s;
  s.grid_step_nm = 1.0;
  s.channel_length_nm = 400.0;
  s.sigma_dg = 0.0;
  s.mean_dg = mean_dg;
  s.sigma_hf_nev = 0.0;
  s.mean_hf_nev = 0.0;
  s.correlation_length_nm = 13.0;
  s.seed = 11;
  return s;
}

PulseSchedule dqd_schedule(double tau_dqd_ns, double b_t = 0.8) {
  ScheduleRequest req;
  req.magnetic_field_t = b_t;
  req.tau_dqd_ns = tau_dqd_ns;
  return build_schedule(req);
}

}  // namespace

TEST_CASE("J = 0 constant-delta evolution matches cos^2(pi nu t)") {
  const double nu_hz = 7.29e6;
  const double b_t = 0.8;
  const auto land = generate_landscape(constant_spec(dg_for_frequency(nu_hz, b_t)));
  const ExchangeModel exchange;  // off during shuttle: J = 0

  // half period: P_S = 0 within 1e-9
  {
    const double t_half = 1.0 / (2.0 * nu_hz);
    const Trajectory traj = trajectory_of(dqd_schedule(t_half * 1e9, b_t));
    const double dt = stable_dt_s(land, b_t);
    const auto state = evolve(TwoLevelState::singlet(), traj, land, b_t, exchange, dt);
    REQUIRE(singlet_probability(state) == Catch::Approx(0.0).margin(1e-9));
  }

  // ten periods sampled at irregular points
  for (const double cycles : {0.23, 0.9, 1.75, 3.4, 5.05, 7.77, 10.0}) {
    const double t_s = cycles / nu_hz;
    const Trajectory traj = trajectory_of(dqd_schedule(t_s * 1e9, b_t));
    const double dt = stable_dt_s(land, b_t);
    const auto state = evolve(TwoLevelState::singlet(), traj, land, b_t, exchange, dt);
    const double expected = std::pow(std::cos(M_PI * nu_hz * t_s), 2.0);
    REQUIRE(singlet_probability(state) == Catch::Approx(expected).margin(1e-9));
    REQUIRE(state.norm() == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("singlet is frozen when the off-diagonal vanishes") {
  const auto land = generate_landscape(constant_spec(0.0));
  ExchangeModel exchange;
  exchange.form = ExchangeModel::Form::exponential_in_detuning;
  exchange.j0_nev = 80.0;  // J = 80 neV throughout
  const Trajectory traj = trajectory_of(dqd_schedule(900.0));
  const double dt = stable_dt_s(land, 0.8, 0.0, exchange.j_ev());
  const auto state = evolve(TwoLevelState::singlet(), traj, land, 0.8, exchange, dt);
  REQUIRE(singlet_probability(state) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("singlet_probability on reference states") {
  TwoLevelState s;
  REQUIRE(singlet_probability(s) == 1.0);
  s.amp_s = 0.0;
  s.amp_t0 = 1.0;
  REQUIRE(singlet_probability(s) == 0.0);
  s.amp_s = {1.0 / std::sqrt(2.0), 0.0};
  s.amp_t0 = {0.0, 1.0 / std::sqrt(2.0)};
  REQUIRE(singlet_probability(s) == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("unitarity over random evolution segments") {
  DisorderSpec spec = constant_spec(5e-4);
  spec.sigma_dg = 2e-4;
  spec.sigma_hf_nev = 40.0;
  spec.seed = 4242;
  const auto land = generate_landscape(spec);
  TwoLevelState state;
  state.amp_s = {0.6, 0.0};
  state.amp_t0 = {0.0, 0.8};
  ScheduleRequest req;
  req.distance_nm = 300.0;
  req.usable_range_nm = 350.0;
  req.tau_dqd_ns = 333.0;
  const Trajectory traj = trajectory_of(build_schedule(req));
  const double dt = stable_dt_s(land, 0.8, 0.0, 0.0);
  const auto out = evolve(state, traj, land, 0.8, ExchangeModel{}, dt);
  REQUIRE(out.norm() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("evolve guards step size and trajectory range") {
  const auto land = generate_landscape(constant_spec(6.51e-4));
  const Trajectory traj = trajectory_of(dqd_schedule(500.0));
  // a 50 ns step advances the phase by ~1.1 rad at 7.29 MHz
  REQUIRE_THROWS_AS(
      evolve(TwoLevelState::singlet(), traj, land, 0.8, ExchangeModel{}, 50e-9),
      std::invalid_argument);

  DisorderSpec tiny = constant_spec(6.51e-4);
  tiny.channel_length_nm = 100.0;
  const auto short_land = generate_landscape(tiny);
  ScheduleRequest req;
  req.distance_nm = 280.0;
  const Trajectory shuttle_traj = trajectory_of(build_schedule(req));
  REQUIRE_THROWS_AS(evolve(TwoLevelState::singlet(), shuttle_traj, short_land, 0.8,
                           ExchangeModel{}, 1e-10),
                    std::out_of_range);
}

TEST_CASE("avg_frequency reproduces the DQD operating point") {
  const auto land = generate_landscape(constant_spec(6.51e-4));
  const double nu = avg_frequency_mhz(land, 0.0, 0.8);
  REQUIRE(nu == Catch::Approx(7.29).epsilon(1e-3));
  // window average of a constant equals the constant for every d
  REQUIRE(avg_frequency_mhz(land, 280.0, 0.8) == Catch::Approx(nu).epsilon(1e-12));
}

TEST_CASE("avg_frequency is linear in B and the 0.6/0.8 ratio is 0.75") {
  DisorderSpec spec = constant_spec(6.51e-4);
  spec.sigma_dg = 1.5e-4;
  spec.seed = 777;
  const auto land = generate_landscape(spec);  // hf identically zero
  for (const double d : {0.0, 35.0, 120.0, 333.0}) {
    const double hi = avg_frequency_mhz(land, d, 0.8);
    const double lo = avg_frequency_mhz(land, d, 0.6);
    REQUIRE(lo / hi == Catch::Approx(0.75).epsilon(1e-12));
  }
}

TEST_CASE("hyperfine-only landscape frequency is independent of B") {
  DisorderSpec spec = constant_spec(0.0);
  spec.mean_hf_nev = 30.0;
  const auto land = generate_landscape(spec);
  const double f1 = avg_frequency_mhz(land, 100.0, 0.2);
  const double f2 = avg_frequency_mhz(land, 100.0, 1.4);
  REQUIRE(f1 == f2);
  REQUIRE(f1 == Catch::Approx(30e-9 / PhysicalConstants::h_ev_s * 1e-6).epsilon(1e-12));
}

TEST_CASE("Eq-3 family: reference values and limits") {
  const DephasingModelParams paper{1110.0, 520.0, 13.0};

  REQUIRE(t2_shuttled_ns(paper, 280.0) == Catch::Approx(2468.7).epsilon(1e-3));
  REQUIRE(t2_epr_model_ns(paper, 0.0) == Catch::Approx(470.9).epsilon(1e-3));

  // strictly increasing in d, asymptote T2L
  double prev = 0.0;
  for (double d = 0.0; d <= 5000.0; d += 50.0) {
    const double t2 = t2_epr_model_ns(paper, d);
    REQUIRE(t2 > prev);
    prev = t2;
  }
  const double far = t2_epr_model_ns(paper, 1e6 * paper.lc_nm);
  REQUIRE(std::abs(far - paper.t2l_ns) / paper.t2l_ns < 1e-3);

  DephasingModelParams static_limited = paper;
  static_limited.t2r_ns = 1e12;
  for (const double d : {0.0, 100.0, 3000.0})
    REQUIRE(t2_epr_model_ns(static_limited, d) ==
            Catch::Approx(paper.t2l_ns).epsilon(1e-9));

  REQUIRE_THROWS_AS(t2_epr_model_ns(DephasingModelParams{0.0, 520.0, 13.0}, 0.0),
                    std::invalid_argument);
}

TEST_CASE("shuttle infidelity: reference point, zero distance, 1/e point") {
  const auto ref = shuttle_infidelity(2460.0, 280.0, 2.8);
  REQUIRE(ref.tau_s_ns == Catch::Approx(200.0).epsilon(1e-12));
  REQUIRE(ref.exact == Catch::Approx(0.0066).margin(2e-4));
  REQUIRE(ref.quadratic == Catch::Approx(0.0066).margin(2e-4));

  REQUIRE(shuttle_infidelity(2460.0, 0.0, 2.8).exact == 0.0);

  const auto one_decay = shuttle_infidelity(200.0, 280.0, 2.8);  // tau_S = T2S
  REQUIRE(one_decay.exact == Catch::Approx(1.0 - std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("monte carlo: zero disorder equals the analytic curve with zero spread") {
  const DisorderSpec spec = constant_spec(6.51e-4);
  for (const double tau_ns : {68.6, 137.2, 300.0}) {
    const auto res = monte_carlo_ps(dqd_schedule(tau_ns), spec, 100);
    const double expected = std::pow(std::cos(M_PI * 7.2894e6 * tau_ns * 1e-9), 2.0);
    REQUIRE(res.mean_p_s == Catch::Approx(expected).margin(2e-4));
    REQUIRE(res.stderr_p < 1e-12);
  }
  REQUIRE_THROWS_AS(monte_carlo_ps(dqd_schedule(100.0), spec, 99),
                    std::invalid_argument);
}

TEST_CASE("monte carlo is deterministic and thread-count independent") {
  DisorderSpec spec = constant_spec(6.51e-4);
  spec.sigma_hf_nev = 1.5;
  spec.seed = 2024;
  MonteCarloOptions opt;
  opt.n_realizations = 300;
  opt.jobs = 1;
  const auto a = monte_carlo_ps(dqd_schedule(400.0), spec, opt);
  opt.jobs = 3;
  const auto b = monte_carlo_ps(dqd_schedule(400.0), spec, opt);
  REQUIRE(a.mean_p_s == b.mean_p_s);
  REQUIRE(a.stderr_p == b.stderr_p);
}

TEST_CASE("monte carlo: hyperfine-only decay matches the Gaussian-average oracle") {
  // sigma_hf chosen so the closed-form envelope gives T2* = 565 ns
  DisorderSpec spec = constant_spec(0.0);
  spec.sigma_hf_nev = sigma_hf_nev_for_t2_ns(565.0);
  spec.seed = 31337;

  ScanData curve;
  for (double tau = 0.0; tau <= 900.0; tau += 45.0) {
    DisorderSpec s = spec;  // same master seed: common realizations across tau
    const auto res = tau == 0.0 ? MonteCarloResult{1.0, 0.0, 2000}
                                : monte_carlo_ps(dqd_schedule(tau), s, 2000);
    curve.push_back({tau, res.mean_p_s, std::max(res.stderr_p, 1e-6)});
  }
  // mean_dg = 0: ensemble mean is 1/2 + 1/2 exp(-(tau/T2)^2)
  const EnvelopeFit fit = fit_envelope(curve);
  REQUIRE(fit.t2_ns == Catch::Approx(565.0).epsilon(0.03));
  REQUIRE(fit.a == Catch::Approx(0.5).margin(0.02));
  REQUIRE(fit.c == Catch::Approx(0.5).margin(0.02));
}

TEST_CASE("dwell weights integrate time exactly and match the direct functional") {
  DisorderSpec spec = constant_spec(3e-4);
  spec.sigma_dg = 2e-4;
  spec.sigma_hf_nev = 25.0;
  spec.seed = 555;
  const auto land = generate_landscape(spec);

  ScheduleRequest req;
  req.wait_at_x_nm = 170.0;
  req.wait_at_ns = 260.0;
  req.tau_dqd_ns = 75.0;
  const Trajectory traj = trajectory_of(build_schedule(req));
  const auto w = dwell_weights(traj, land);

  double total = 0.0;
  for (const double wi : w) total += wi;
  REQUIRE(total == Catch::Approx(traj.total_time_s()).epsilon(1e-12));

  // sum_i w_i f_i vs the independent window/point decomposition
  double weighted_dg = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) weighted_dg += w[i] * land.dg_values[i];
  const double t_leg_s = 170.0 / 2.8 * 1e-9;
  const double direct = 2.0 * t_leg_s * land.window_average(0.0, 170.0).dg +
                        260e-9 * land.field_at(170.0).dg +
                        75e-9 * land.field_at(0.0).dg;
  REQUIRE(weighted_dg == Catch::Approx(direct).epsilon(1e-10));
}

TEST_CASE("phase law sigma matches the ensemble of landscape realizations") {
  DisorderSpec spec = constant_spec(0.0);
  spec.sigma_dg = 2e-4;
  spec.sigma_hf_nev = 10.0;
  spec.channel_length_nm = 400.0;
  spec.seed = 909;

  ScheduleRequest req;
  req.wait_at_x_nm = 200.0;
  req.wait_at_ns = 150.0;
  const Trajectory traj = trajectory_of(build_schedule(req));
  const PhaseLaw law = phase_law(traj, spec, 0.8);

  const int n_real = 4000;
  const double t_leg_s = 200.0 / 2.8 * 1e-9;
  double sum = 0.0, sumsq = 0.0;
  for (int r = 0; r < n_real; ++r) {
    DisorderSpec s = spec;
    s.seed = 123000 + static_cast<std::uint64_t>(r);
    const auto land = generate_landscape(s);
    const auto win = land.window_average(0.0, 200.0);
    const auto pt = land.field_at(200.0);
    const double delta_int_ev =
        2.0 * t_leg_s * (zeeman_energy_ev(win.dg, 0.8) + win.hf_nev * units::nev_to_ev) +
        150e-9 * (zeeman_energy_ev(pt.dg, 0.8) + pt.hf_nev * units::nev_to_ev);
    const double cycles = delta_int_ev / PhysicalConstants::h_ev_s;
    sum += cycles;
    sumsq += cycles * cycles;
  }
  const double mean = sum / n_real;
  const double sd = std::sqrt(sumsq / n_real - mean * mean);
  CAPTURE(sd, law.sigma_cycles());
  REQUIRE(sd == Catch::Approx(law.sigma_cycles()).epsilon(0.04));
}

TEST_CASE("fast ensemble curves agree with the propagator Monte Carlo") {
  DisorderSpec spec = constant_spec(6.51e-4);
  spec.sigma_dg = 8e-5;
  spec.sigma_hf_nev = 1.0;
  spec.seed = 640;

  const double d = 130.0;
  const std::vector<double> taus{120.0, 260.0, 420.0};
  const auto curves =
      ensemble_st0_curves(spec, {d}, {taus}, 0.8, 500, MonteCarloOptions{});

  for (std::size_t k = 0; k < taus.size(); ++k) {
    ScheduleRequest req;
    req.distance_nm = d;
    req.shuttle_time_ns = taus[k];
    MonteCarloOptions opt;
    opt.n_realizations = 500;
    const auto slow = monte_carlo_ps(build_schedule(req), spec, opt);
    CAPTURE(taus[k], curves.mean_ps[0][k], slow.mean_p_s);
    REQUIRE(curves.mean_ps[0][k] == Catch::Approx(slow.mean_p_s).margin(2e-3));
  }
}

TEST_CASE("nu(d) smooths out as the window grows") {
  DisorderSpec spec = constant_spec(6.51e-4);
  spec.sigma_dg = 1.5e-4;
  spec.channel_length_nm = 450.0;

  const std::vector<double> d0_grid{20.0, 120.0, 220.0, 320.0};
  const double window = 100.0, step = 4.0;
  std::vector<double> mean_tv(d0_grid.size(), 0.0);
  const int n_seeds = 150;
  for (int r = 0; r < n_seeds; ++r) {
    spec.seed = 55000 + static_cast<std::uint64_t>(r);
    const auto land = generate_landscape(spec);
    for (std::size_t k = 0; k < d0_grid.size(); ++k) {
      double tv = 0.0;
      double prev = avg_frequency_mhz(land, d0_grid[k], 0.8);
      for (double d = d0_grid[k] + step; d <= d0_grid[k] + window + 1e-9; d += step) {
        const double nu = avg_frequency_mhz(land, d, 0.8);
        tv += std::abs(nu - prev);
        prev = nu;
      }
      mean_tv[k] += tv;
    }
  }
  for (auto& tv : mean_tv) tv /= n_seeds;
  CAPTURE(mean_tv[0], mean_tv[1], mean_tv[2], mean_tv[3]);
  for (std::size_t k = 1; k < mean_tv.size(); ++k)
    REQUIRE(mean_tv[k] <= mean_tv[k - 1] * 1.02);
  REQUIRE(mean_tv.back() < 0.7 * mean_tv.front());
}
