// Curve-fit checks: round trips against known generators, the single-tone
// fallback, tone ordering, error-bar coverage and the motional-narrowing
// fit. Generators are written out longhand here so the fits are verified
// against an independent construction of each model.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "shuttlesim/analysis.hpp"
#include "shuttlesim/random.hpp"

using namespace shuttlesim;

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

// P(tau) = exp(-(tau/T2)^2) * sum_i a_i cos(2 pi nu_i tau + phi_i) + c
double two_tone_model(double tau_ns, double t2_ns, double a1, double nu1_mhz,
                      double phi1, double a2, double nu2_mhz, double phi2,
                      double c) {
  const double env = std::exp(-(tau_ns / t2_ns) * (tau_ns / t2_ns));
  return env * (a1 * std::cos(kTwoPi * nu1_mhz * 1e-3 * tau_ns + phi1) +
                a2 * std::cos(kTwoPi * nu2_mhz * 1e-3 * tau_ns + phi2)) +
         c;
}

ScanData sample_two_tone(double t2_ns, double a1, double nu1, double phi1,
                         double a2, double nu2, double phi2, double c,
                         double tau_max_ns, double step_ns, double noise_sigma = 0.0,
                         std::uint64_t seed = 0) {
  ScanData data;
  GaussianSampler gauss(seed);
  for (double tau = 0.0; tau <= tau_max_ns + 1e-9; tau += step_ns) {
    ScanPoint p;
    p.tau_ns = tau;
    p.p_s = two_tone_model(tau, t2_ns, a1, nu1, phi1, a2, nu2, phi2, c);
    if (noise_sigma > 0.0) {
      p.p_s += noise_sigma * gauss();
      p.stderr_p = noise_sigma;
    }
    data.push_back(p);
  }
  return data;
}

}  // namespace

TEST_CASE("two-tone fit recovers a noiseless generator to 0.1%") {
  const auto data = sample_two_tone(565.0, 0.25, 5.0, 0.3, 0.25, 7.29, -0.8, 0.5,
                                    1200.0, 5.0);
  const St0TwoToneFit fit = fit_two_tone(data);
  REQUIRE_FALSE(fit.single_tone_fallback);
  REQUIRE(fit.t2_star_ns == Catch::Approx(565.0).epsilon(1e-3));
  REQUIRE(fit.lt.nu_mhz == Catch::Approx(5.0).epsilon(1e-3));
  REQUIRE(fit.gt.nu_mhz == Catch::Approx(7.29).epsilon(1e-3));
  REQUIRE(fit.lt.a == Catch::Approx(0.25).epsilon(1e-3));
  REQUIRE(fit.gt.a == Catch::Approx(0.25).epsilon(1e-3));
  REQUIRE(fit.lt.phi_rad == Catch::Approx(0.3).margin(1e-3));
  REQUIRE(fit.gt.phi_rad == Catch::Approx(-0.8).margin(1e-3));
  REQUIRE(fit.c == Catch::Approx(0.5).margin(1e-4));
  REQUIRE(fit.residual_rms < 1e-6);
  REQUIRE(fit.lt.nu_mhz <= fit.gt.nu_mhz);
}

TEST_CASE("degenerate second tone falls back to a flagged single-tone fit") {
  const auto data =
      sample_two_tone(565.0, 0.5, 7.29, 0.2, 0.0, 0.0, 0.0, 0.5, 1200.0, 5.0);
  const St0TwoToneFit fit = fit_two_tone(data);
  REQUIRE(fit.single_tone_fallback);
  REQUIRE(fit.lt.nu_mhz == Catch::Approx(7.29).epsilon(5e-3));
  REQUIRE(fit.gt.a == 0.0);
}

TEST_CASE("tone ordering is canonical regardless of generator term order") {
  const auto a = sample_two_tone(600.0, 0.2, 6.5, 0.1, 0.3, 4.0, 1.0, 0.45,
                                 1000.0, 4.0);
  const auto b = sample_two_tone(600.0, 0.3, 4.0, 1.0, 0.2, 6.5, 0.1, 0.45,
                                 1000.0, 4.0);
  const St0TwoToneFit fa = fit_two_tone(a);
  const St0TwoToneFit fb = fit_two_tone(b);
  REQUIRE(fa.lt.nu_mhz == Catch::Approx(fb.lt.nu_mhz).epsilon(1e-12));
  REQUIRE(fa.gt.nu_mhz == Catch::Approx(fb.gt.nu_mhz).epsilon(1e-12));
  REQUIRE(fa.lt.a == Catch::Approx(fb.lt.a).epsilon(1e-12));
  REQUIRE(fa.lt.nu_mhz < fa.gt.nu_mhz);
}

TEST_CASE("single-tone fit recovers the DQD reference generator") {
  const auto data =
      sample_two_tone(565.0, 0.5, 7.29, 0.0, 0.0, 0.0, 0.0, 0.5, 1200.0, 5.0);
  const St0SingleToneFit fit = fit_single_tone(data);
  REQUIRE(fit.tone.nu_mhz == Catch::Approx(7.29).epsilon(5e-3));
  REQUIRE(fit.t2_star_ns == Catch::Approx(565.0).epsilon(5e-3));
  REQUIRE(fit.tone.a == Catch::Approx(0.5).epsilon(5e-3));
  REQUIRE(fit.c == Catch::Approx(0.5).margin(1e-3));
}

TEST_CASE("constant data fits to zero amplitude with the offset recovered") {
  ScanData data;
  for (double tau = 0.0; tau <= 500.0; tau += 10.0) data.push_back({tau, 0.37, 0.0});
  const St0SingleToneFit fit = fit_single_tone(data);
  REQUIRE(std::abs(fit.tone.a) < 1e-5);
  REQUIRE(fit.c == Catch::Approx(0.37).margin(1e-5));
}

TEST_CASE("accepted-step cost trace is non-increasing") {
  const auto data = sample_two_tone(500.0, 0.3, 5.5, 0.4, 0.2, 8.0, -0.2, 0.5,
                                    900.0, 5.0, 0.01, 99);
  const St0TwoToneFit fit = fit_two_tone(data);
  REQUIRE(fit.cost_trace.size() >= 2);
  for (std::size_t i = 1; i < fit.cost_trace.size(); ++i)
    REQUIRE(fit.cost_trace[i] <= fit.cost_trace[i - 1]);
}

TEST_CASE("1-sigma intervals for nu have ~68% coverage over noisy repeats") {
  const double nu_true = 7.29;
  int covered = 0, within3 = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const auto data = sample_two_tone(565.0, 0.5, nu_true, 0.0, 0.0, 0.0, 0.0, 0.5,
                                      1200.0, 10.0, 0.01,
                                      1234 + static_cast<std::uint64_t>(t));
    const St0SingleToneFit fit = fit_single_tone(data);
    const double err = std::abs(fit.tone.nu_mhz - nu_true);
    if (err <= fit.tone.nu_err_mhz) ++covered;
    if (err <= 3.0 * fit.tone.nu_err_mhz) ++within3;
  }
  CAPTURE(covered, within3);
  REQUIRE(covered >= 58);
  REQUIRE(covered <= 78);
  REQUIRE(within3 >= 98);
}

TEST_CASE("envelope fit recovers a pure Gaussian decay") {
  ScanData data;
  for (double tau = 0.0; tau <= 2000.0; tau += 40.0) {
    const double env = 0.5 * std::exp(-(tau / 800.0) * (tau / 800.0));
    data.push_back({tau, env + 0.5, 0.0});
  }
  const EnvelopeFit fit = fit_envelope(data);
  REQUIRE(fit.t2_ns == Catch::Approx(800.0).epsilon(1e-3));
  REQUIRE(fit.a == Catch::Approx(0.5).epsilon(1e-3));
  REQUIRE(fit.c == Catch::Approx(0.5).margin(1e-3));
}

TEST_CASE("narrowing fit round-trips the reference parameter set") {
  const double t2l = 1110.0, t2r = 520.0, lc = 13.0;
  std::vector<NarrowingPoint> points;
  for (const double d : {0.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0, 280.0, 560.0,
                         1120.0, 2240.0}) {
    NarrowingPoint p;
    p.d_nm = d;
    p.t2_ns = narrowing_t2_ns(t2l, t2r, lc, d);
    p.stderr_ns = 0.01 * p.t2_ns;
    points.push_back(p);
  }
  const NarrowingFit fit = fit_narrowing(points);
  REQUIRE(fit.lc_identifiable);
  REQUIRE(fit.t2l_ns == Catch::Approx(t2l).epsilon(0.01));
  REQUIRE(fit.t2r_ns == Catch::Approx(t2r).epsilon(0.01));
  REQUIRE(fit.lc_nm == Catch::Approx(lc).epsilon(0.01));

  // shuttled-spin dephasing implied by the fitted parameters at d = 280 nm
  const double t2s = fit.t2r_ns * std::sqrt((280.0 + fit.lc_nm) / fit.lc_nm);
  REQUIRE(t2s == Catch::Approx(2469.0).epsilon(0.01));
}

TEST_CASE("flat T2(d) marks lc unidentifiable") {
  std::vector<NarrowingPoint> points;
  for (const double d : {0.0, 50.0, 200.0, 800.0, 2000.0})
    points.push_back({d, 500.0, 5.0});
  const NarrowingFit fit = fit_narrowing(points);
  REQUIRE_FALSE(fit.lc_identifiable);
}

TEST_CASE("narrowing fit input guards") {
  std::vector<NarrowingPoint> few{{0.0, 500.0, 5.0}, {10.0, 520.0, 5.0},
                                  {20.0, 540.0, 5.0}};
  REQUIRE_THROWS_AS(fit_narrowing(few), std::invalid_argument);
  std::vector<NarrowingPoint> degenerate{{50.0, 500.0, 5.0}, {50.0, 501.0, 5.0},
                                         {50.0, 499.0, 5.0}, {50.0, 500.5, 5.0}};
  REQUIRE_THROWS_AS(fit_narrowing(degenerate), std::invalid_argument);
}

TEST_CASE("frequency ratios: Zeeman linearity gives exactly 0.75") {
  std::vector<FrequencyPoint> lo, hi;
  for (const double d : {0.0, 70.0, 140.0, 280.0}) {
    const double base = 7.29 * (1.0 + 0.03 * std::sin(d));  // any landscape shape
    hi.push_back({d, base, 0.01});
    lo.push_back({d, base * 0.75, 0.0075});
  }
  const auto ratios = frequency_ratio_report(lo, hi);
  for (const auto& r : ratios) REQUIRE(r.ratio == Catch::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("frequency ratios: hyperfine offset shifts the ratio analytically") {
  // nu(B) = (a B + e) / h with a from dg and a B-independent hyperfine part
  const double a = 9.1125;  // MHz per tesla
  const double e = 0.6;     // MHz, hyperfine contribution
  std::vector<FrequencyPoint> lo{{0.0, a * 0.6 + e, 0.0}};
  std::vector<FrequencyPoint> hi{{0.0, a * 0.8 + e, 0.0}};
  const auto ratios = frequency_ratio_report(lo, hi);
  const double expected = (a * 0.6 + e) / (a * 0.8 + e);
  REQUIRE(ratios.front().ratio == Catch::Approx(expected).epsilon(1e-12));
  REQUIRE(ratios.front().ratio > 0.75);
}

TEST_CASE("frequency ratios reject mismatched grids") {
  std::vector<FrequencyPoint> lo{{0.0, 5.0, 0.1}, {70.0, 5.2, 0.1}};
  std::vector<FrequencyPoint> hi{{0.0, 6.6, 0.1}};
  REQUIRE_THROWS_AS(frequency_ratio_report(lo, hi), std::invalid_argument);
  hi.push_back({80.0, 6.9, 0.1});
  REQUIRE_THROWS_AS(frequency_ratio_report(lo, hi), std::invalid_argument);
}
