// Disorder-landscape checks. Ensemble statistics are tested against
// kernel quadrature oracles computed here, independent of the circulant
// synthesis under test; all RNG is seeded, so every check is
// deterministic.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <vector>

#include "shuttlesim/landscape.hpp"

using namespace shuttlesim;

namespace {

DisorderSpec base_spec() {
  DisorderSpec s;
  s.grid_step_nm = 1.0;
  s.channel_length_nm = 260.0;
  s.sigma_dg = 0.5;
  s.mean_dg = 0.0;
  s.sigma_hf_nev = 0.0;
  s.mean_hf_nev = 0.0;
  s.correlation_length_nm = 13.0;
  s.kernel = CorrelationKernel::exponential;
  s.seed = 20240601;
  return s;
}

// Oracle: variance of the trapezoidal window mean over [0, d] for a unit
// field, from the covariance kernel alone (quadrature over the grid).
double window_mean_variance_oracle(const DisorderSpec& spec, double d_nm) {
  const double dx = spec.grid_step_nm;
  const auto n = static_cast<std::size_t>(std::llround(d_nm / dx)) + 1;
  std::vector<double> w(n, dx);
  w.front() = 0.5 * dx;
  w.back() = 0.5 * dx;
  const double u = dx / spec.correlation_length_nm;
  double quad = 0.0;
  for (const double wi : w) quad += wi * wi;
  for (std::size_t lag = 1; lag < n; ++lag) {
    const double k = kernel_value(spec.kernel, static_cast<double>(lag) * u);
    if (k < 1e-18) break;
    double acc = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) acc += w[i] * w[i + lag];
    quad += 2.0 * k * acc;
  }
  return quad / (d_nm * d_nm);
}

}  // namespace

TEST_CASE("zero-variance field is constant") {
  DisorderSpec spec = base_spec();
  spec.sigma_dg = 0.0;
  spec.mean_dg = 6.51e-4;
  const auto land = generate_landscape(spec);
  for (const double v : land.dg_values) REQUIRE(v == 6.51e-4);
  for (const double v : land.hf_values_nev) REQUIRE(v == 0.0);
}

TEST_CASE("same seed and spec give bit-identical landscapes") {
  const DisorderSpec spec = base_spec();
  const auto a = generate_landscape(spec);
  const auto b = generate_landscape(spec);
  REQUIRE(a.dg_values.size() == b.dg_values.size());
  REQUIRE(std::memcmp(a.dg_values.data(), b.dg_values.data(),
                      a.dg_values.size() * sizeof(double)) == 0);
  REQUIRE(std::memcmp(a.hf_values_nev.data(), b.hf_values_nev.data(),
                      a.hf_values_nev.size() * sizeof(double)) == 0);
}

TEST_CASE("invalid specs are rejected") {
  DisorderSpec spec = base_spec();
  spec.grid_step_nm = 0.0;
  REQUIRE_THROWS_AS(generate_landscape(spec), std::invalid_argument);
  spec = base_spec();
  spec.correlation_length_nm = -1.0;
  REQUIRE_THROWS_AS(generate_landscape(spec), std::invalid_argument);
  spec = base_spec();
  spec.channel_length_nm = 0.5;  // below grid_step
  REQUIRE_THROWS_AS(generate_landscape(spec), std::invalid_argument);
  spec = base_spec();
  spec.sigma_dg = -0.1;
  REQUIRE_THROWS_AS(generate_landscape(spec), std::invalid_argument);
}

TEST_CASE("empirical autocorrelation at one correlation length") {
  // 1e4 realizations; E[z(x) z(x+lc)] = sigma^2 / e for both kernels
  const int n_real = 10000;
  for (const auto kernel : {CorrelationKernel::exponential, CorrelationKernel::gaussian}) {
    DisorderSpec spec = base_spec();
    spec.kernel = kernel;
    const auto lag = static_cast<std::size_t>(spec.correlation_length_nm);
    double acc = 0.0;
    std::size_t count = 0;
    for (int r = 0; r < n_real; ++r) {
      spec.seed = 777000 + static_cast<std::uint64_t>(r);
      const auto land = generate_landscape(spec);
      for (std::size_t i = 0; i + lag < land.size(); ++i) {
        acc += land.dg_values[i] * land.dg_values[i + lag];
        ++count;
      }
    }
    const double rho = acc / static_cast<double>(count);
    const double expected = spec.sigma_dg * spec.sigma_dg * std::exp(-1.0);
    CAPTURE(to_string(kernel), rho, expected);
    REQUIRE(rho == Catch::Approx(expected).epsilon(0.03));
  }
}

TEST_CASE("stationarity of ensemble mean and variance over seeds") {
  const int n_seeds = 1500;
  DisorderSpec spec = base_spec();
  const std::vector<std::size_t> probes{10, 60, 110, 160, 210, 250};
  std::vector<double> sum(probes.size(), 0.0), sumsq(probes.size(), 0.0);
  for (int r = 0; r < n_seeds; ++r) {
    spec.seed = 31000 + static_cast<std::uint64_t>(r);
    const auto land = generate_landscape(spec);
    for (std::size_t p = 0; p < probes.size(); ++p) {
      const double v = land.dg_values[probes[p]];
      sum[p] += v;
      sumsq[p] += v * v;
    }
  }
  // chi^2 over per-position standardized means; Wilson-Hilferty 0.9999
  // quantile for 6 dof is ~28.4
  double chi2 = 0.0;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const double mean = sum[p] / n_seeds;
    const double z = mean * std::sqrt(static_cast<double>(n_seeds)) / spec.sigma_dg;
    chi2 += z * z;
    const double var = sumsq[p] / n_seeds - mean * mean;
    const double zvar = (var / (spec.sigma_dg * spec.sigma_dg) - 1.0) /
                        std::sqrt(2.0 / (n_seeds - 1.0));
    CAPTURE(p, var, zvar);
    REQUIRE(std::abs(zvar) < 5.0);
  }
  CAPTURE(chi2);
  REQUIRE(chi2 < 28.4);
}

TEST_CASE("sample mean converges to mean_dg over seeds") {
  const int n_seeds = 2000;
  DisorderSpec spec = base_spec();
  spec.mean_dg = 6.51e-4;
  double grand = 0.0;
  for (int r = 0; r < n_seeds; ++r) {
    spec.seed = 99000 + static_cast<std::uint64_t>(r);
    const auto land = generate_landscape(spec);
    double m = 0.0;
    for (const double v : land.dg_values) m += v;
    grand += m / static_cast<double>(land.size());
  }
  grand /= n_seeds;
  const auto n_grid = static_cast<double>(
      static_cast<std::size_t>(spec.channel_length_nm / spec.grid_step_nm) + 1);
  // loose contract bound 5 sigma / sqrt(N_grid), plus the sharp bound from
  // the correlated-field variance of the spatial mean
  REQUIRE(std::abs(grand - spec.mean_dg) <= 5.0 * spec.sigma_dg / std::sqrt(n_grid));
  const double var_spatial_mean =
      spec.sigma_dg * spec.sigma_dg *
      window_mean_variance_oracle(spec, spec.channel_length_nm);
  REQUIRE(std::abs(grand - spec.mean_dg) <=
          5.0 * std::sqrt(var_spatial_mean / n_seeds));
}

TEST_CASE("field_at: exact at nodes, linear between, guarded outside") {
  const auto land = generate_landscape(base_spec());
  REQUIRE(land.field_at(17.0).dg == land.dg_values[17]);
  const double mid = land.field_at(17.5).dg;
  REQUIRE(mid == Catch::Approx(0.5 * (land.dg_values[17] + land.dg_values[18])).margin(1e-15));
  REQUIRE_THROWS_AS(land.field_at(-0.5), std::out_of_range);
  REQUIRE_THROWS_AS(land.field_at(land.span_nm() + 0.5), std::out_of_range);

  DisorderSpec flat = base_spec();
  flat.sigma_dg = 0.0;
  flat.mean_dg = 1.25e-4;
  const auto constant = generate_landscape(flat);
  REQUIRE(constant.field_at(123.456).dg == 1.25e-4);
}

TEST_CASE("window_average: constants, ramps and edge contracts") {
  DisorderSpec spec = base_spec();
  spec.sigma_dg = 0.0;
  spec.mean_dg = 3.3e-4;
  const auto constant = generate_landscape(spec);
  for (const double d : {0.0, 1.0, 17.3, 259.0})
    REQUIRE(constant.window_average(0.0, d).dg == Catch::Approx(3.3e-4).epsilon(1e-14));

  // linear ramp a + b x: average over [0, d] is a + b d / 2
  ZeemanLandscape ramp = constant;
  const double a = 2.0e-4, b = 1.5e-6;
  for (std::size_t i = 0; i < ramp.size(); ++i)
    ramp.dg_values[i] = a + b * ramp.positions_nm[i];
  const double d = 200.0;
  REQUIRE(ramp.window_average(0.0, d).dg ==
          Catch::Approx(a + 0.5 * b * d).epsilon(1e-12));
  // non-grid-aligned window on the same ramp
  REQUIRE(ramp.window_average(10.25, 37.5).dg ==
          Catch::Approx(a + b * (10.25 + 0.5 * 37.5)).epsilon(1e-12));

  REQUIRE(constant.window_average(42.0, 0.0).dg == constant.field_at(42.0).dg);
  REQUIRE_THROWS_AS(constant.window_average(200.0, 100.0), std::out_of_range);
  REQUIRE_THROWS_AS(constant.window_average(0.0, -1.0), std::invalid_argument);
}

TEST_CASE("variance of the windowed mean matches the kernel oracle at d = 200 lc") {
  const int n_real = 10000;
  DisorderSpec spec = base_spec();
  spec.channel_length_nm = 2600.0;
  const double d = 200.0 * spec.correlation_length_nm;  // 2600 nm
  double sum = 0.0, sumsq = 0.0;
  for (int r = 0; r < n_real; ++r) {
    spec.seed = 555000 + static_cast<std::uint64_t>(r);
    const auto land = generate_landscape(spec);
    const double m = land.window_average(0.0, d).dg;
    sum += m;
    sumsq += m * m;
  }
  const double mean = sum / n_real;
  const double var = (sumsq / n_real - mean * mean) / (spec.sigma_dg * spec.sigma_dg);
  const double oracle = window_mean_variance_oracle(spec, d);
  CAPTURE(var, oracle);
  REQUIRE(var == Catch::Approx(oracle).epsilon(0.05));
}

TEST_CASE("variance suppression: monotone in d with log-log slope -1 for d >> lc") {
  DisorderSpec spec = base_spec();
  spec.channel_length_nm = 13000.0;
  const std::vector<double> d_grid{130.0,  325.0,  650.0,  1300.0,
                                   3250.0, 6500.0, 13000.0};

  // the kernel oracle itself is strictly decreasing on a fine grid
  double prev = 1e300;
  for (double d = 13.0; d <= 13000.0; d *= 1.35) {
    const double v = window_mean_variance_oracle(spec, d);
    REQUIRE(v < prev);
    prev = v;
  }

  // Monte Carlo ensemble variance over the same window family
  const int n_real = 3000;
  std::vector<double> sum(d_grid.size(), 0.0), sumsq(d_grid.size(), 0.0);
  for (int r = 0; r < n_real; ++r) {
    spec.seed = 808000 + static_cast<std::uint64_t>(r);
    const auto land = generate_landscape(spec);
    for (std::size_t k = 0; k < d_grid.size(); ++k) {
      const double m = land.window_average(0.0, d_grid[k]).dg;
      sum[k] += m;
      sumsq[k] += m * m;
    }
  }
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < d_grid.size(); ++k) {
    const double mean = sum[k] / n_real;
    const double var = sumsq[k] / n_real - mean * mean;
    const double x = std::log(d_grid[k]);
    const double y = std::log(var);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const auto nk = static_cast<double>(d_grid.size());
  const double slope = (nk * sxy - sx * sy) / (nk * sxx - sx * sx);
  CAPTURE(slope);
  REQUIRE(slope == Catch::Approx(-1.0).margin(0.1));
}

TEST_CASE("csv export/import round trip with spec sidecar") {
  const auto land = generate_landscape(base_spec());
  const auto dir = std::filesystem::temp_directory_path() / "shuttlesim_land_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "landscape.csv").string();
  export_landscape(land, path);
  const auto back = import_landscape(path);
  REQUIRE(back.size() == land.size());
  for (std::size_t i = 0; i < land.size(); ++i) {
    REQUIRE(back.positions_nm[i] == land.positions_nm[i]);
    REQUIRE(back.dg_values[i] == land.dg_values[i]);
    REQUIRE(back.hf_values_nev[i] == land.hf_values_nev[i]);
  }
  REQUIRE(back.spec.correlation_length_nm == land.spec.correlation_length_nm);
  REQUIRE(back.spec.seed == land.spec.seed);
  std::filesystem::remove_all(dir);
}
