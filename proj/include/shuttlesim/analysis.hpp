#pragma once

// Least-squares fits of the ST0 oscillation models to P_S data:
//   two-tone   P(tau) = exp(-(tau/T2)^2) * (a1 cos(2 pi nu1 tau + phi1)
//                       + a2 cos(2 pi nu2 tau + phi2)) + c
//   single     P(tau) = a exp(-(tau/T2)^2) cos(2 pi nu tau + phi) + c
//   envelope   P(tau) = a exp(-(tau/T2)^2) + c
//   narrowing  (1/T2*)^2 = (1/T2L)^2 + (1/T2R)^2 * lc / (d + lc)
// plus the pairwise frequency-ratio table for two magnetic fields.
//
// Tones are seeded from the two largest FFT peaks (Hann window, 4x
// zero-padding) and refined by damped least squares; everything is
// deterministic for identical inputs.

#include <algorithm>
#include <cmath>
#include <complex>
#include <optional>
#include <stdexcept>
#include <vector>

#include "shuttlesim/fft.hpp"
#include "shuttlesim/lm.hpp"

namespace shuttlesim {

struct ScanPoint {
  double tau_ns = 0.0;
  double p_s = 0.0;
  double stderr_p = 0.0;  // 0 means unknown -> uniform weighting
};

using ScanData = std::vector<ScanPoint>;

namespace detail {

struct TonePeak {
  double nu_per_ns;  // cycles per ns
  double magnitude;
  double phase_rad;
};

struct Spectrum {
  std::vector<TonePeak> peaks;  // strongest first
  double floor = 0.0;           // median magnitude, same amplitude scale
};

// Spectral peaks of (tau, y) on a uniform grid, strongest first.
inline Spectrum spectral_peaks(const ScanData& data) {
  const std::size_t n = data.size();
  if (n < 4) return {};
  const double dt = (data.back().tau_ns - data.front().tau_ns) /
                    static_cast<double>(n - 1);
  if (dt <= 0.0) throw std::invalid_argument("spectral_peaks: tau not increasing");
  for (std::size_t i = 1; i < n; ++i) {
    const double step = data[i].tau_ns - data[i - 1].tau_ns;
    if (std::abs(step - dt) > 0.05 * dt)
      throw std::invalid_argument("fit initialization requires a uniform tau grid");
  }

  double mean = 0.0;
  for (const auto& p : data) mean += p.p_s;
  mean /= static_cast<double>(n);

  const std::size_t m = next_pow2(4 * n);
  std::vector<std::complex<double>> buf(m, 0.0);
  double window_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) /
                                          static_cast<double>(n - 1));
    buf[i] = (data[i].p_s - mean) * w;
    window_sum += w;
  }
  fft(buf);

  std::vector<double> mag(m / 2);
  for (std::size_t k = 0; k < m / 2; ++k) mag[k] = std::abs(buf[k]);

  Spectrum spectrum;
  {
    std::vector<double> sorted(mag.begin() + 1, mag.end());
    std::sort(sorted.begin(), sorted.end());
    spectrum.floor = 2.0 * sorted[sorted.size() / 2] / window_sum;
  }

  std::vector<TonePeak>& peaks = spectrum.peaks;
  for (std::size_t k = 2; k + 2 < m / 2; ++k) {
    if (mag[k] > mag[k - 1] && mag[k] >= mag[k + 1]) {
      // parabolic refinement on log-magnitude
      double delta = 0.0;
      if (mag[k - 1] > 0.0 && mag[k + 1] > 0.0 && mag[k] > 0.0) {
        const double lm = std::log(mag[k - 1]), l0 = std::log(mag[k]),
                     lp = std::log(mag[k + 1]);
        const double denom = lm - 2.0 * l0 + lp;
        if (denom < 0.0) delta = std::clamp(0.5 * (lm - lp) / denom, -0.5, 0.5);
      }
      TonePeak peak;
      peak.nu_per_ns = (static_cast<double>(k) + delta) /
                       (static_cast<double>(m) * dt);
      peak.magnitude = 2.0 * mag[k] / window_sum;
      peak.phase_rad = std::arg(buf[k]) -
                       2.0 * M_PI * peak.nu_per_ns * data.front().tau_ns;
      peaks.push_back(peak);
    }
  }
  std::sort(peaks.begin(), peaks.end(),
            [](const TonePeak& a, const TonePeak& b) { return a.magnitude > b.magnitude; });
  return spectrum;
}

inline double wrap_phase(double phi) {
  phi = std::fmod(phi, 2.0 * M_PI);
  if (phi <= -M_PI) phi += 2.0 * M_PI;
  if (phi > M_PI) phi -= 2.0 * M_PI;
  return phi;
}

inline Eigen::VectorXd weights_of(const ScanData& data) {
  Eigen::VectorXd w(static_cast<Eigen::Index>(data.size()));
  bool any = false;
  for (std::size_t i = 0; i < data.size(); ++i) any = any || data[i].stderr_p > 0.0;
  for (std::size_t i = 0; i < data.size(); ++i)
    w[static_cast<Eigen::Index>(i)] =
        any ? 1.0 / std::max(data[i].stderr_p, 1e-12) : 1.0;
  return w;
}

inline double residual_rms(const ScanData& data,
                           const std::function<double(double)>& model) {
  double ss = 0.0;
  for (const auto& p : data) {
    const double r = p.p_s - model(p.tau_ns);
    ss += r * r;
  }
  return std::sqrt(ss / static_cast<double>(data.size()));
}

}  // namespace detail

struct Tone {
  double a = 0.0;
  double nu_mhz = 0.0;
  double phi_rad = 0.0;
  double a_err = 0.0;
  double nu_err_mhz = 0.0;
  double phi_err_rad = 0.0;
};

struct St0SingleToneFit {
  double t2_star_ns = 0.0;
  double t2_star_err_ns = 0.0;
  Tone tone;
  double c = 0.0;
  double c_err = 0.0;
  Eigen::MatrixXd covariance;  // order: T2, a, nu, phi, c (natural units)
  double residual_rms = 0.0;
  std::vector<double> cost_trace;
};

struct St0TwoToneFit {
  double t2_star_ns = 0.0;
  double t2_star_err_ns = 0.0;
  Tone lt;  // lower frequency
  Tone gt;  // higher frequency
  double c = 0.0;
  double c_err = 0.0;
  Eigen::MatrixXd covariance;  // order: T2, a<, nu<, phi<, a>, nu>, phi>, c
  double residual_rms = 0.0;
  bool single_tone_fallback = false;
  std::vector<double> cost_trace;
};

namespace detail {

// Shared fitter: n_tones in {0, 1, 2}; tau scaled to [0, 1], T2 in log
// space so positivity holds by construction.
struct ToneFitRaw {
  double t2_ns, t2_err_ns;
  std::vector<Tone> tones;
  double c, c_err;
  Eigen::MatrixXd covariance;
  double rms;
  std::vector<double> cost_trace;
};

inline ToneFitRaw fit_tones(const ScanData& data, int n_tones) {
  if (data.size() < static_cast<std::size_t>(4 + 3 * n_tones))
    throw std::invalid_argument("fit: not enough data points");
  const double span = data.back().tau_ns - data.front().tau_ns;
  if (span <= 0.0) throw std::invalid_argument("fit: tau span must be positive");

  double mean = 0.0, ymin = 1e300, ymax = -1e300;
  for (const auto& p : data) {
    mean += p.p_s;
    ymin = std::min(ymin, p.p_s);
    ymax = std::max(ymax, p.p_s);
  }
  mean /= static_cast<double>(data.size());

  std::vector<TonePeak> peaks;
  if (n_tones > 0) peaks = spectral_peaks(data).peaks;

  // parameter vector: [log(T2/span), (a, nu*span, phi) per tone, c]
  const int np = 2 + 3 * n_tones;
  Eigen::VectorXd p0(np);
  p0[0] = std::log(0.7);
  for (int t = 0; t < n_tones; ++t) {
    const double a0 = t < static_cast<int>(peaks.size())
                          ? std::max(peaks[t].magnitude, 1e-4)
                          : std::max(0.5 * (ymax - ymin), 1e-4);
    const double nu0 = t < static_cast<int>(peaks.size())
                           ? peaks[t].nu_per_ns * span
                           : 1.0 + t;
    const double phi0 = t < static_cast<int>(peaks.size()) ? peaks[t].phase_rad : 0.0;
    p0[1 + 3 * t] = a0;
    p0[2 + 3 * t] = nu0;
    p0[3 + 3 * t] = phi0;
  }
  p0[np - 1] = mean;

  const Eigen::VectorXd w = weights_of(data);
  const double tau0 = data.front().tau_ns;

  auto model_scaled = [n_tones](const Eigen::VectorXd& q, double ts) {
    const double env = std::exp(-std::pow(ts / std::exp(q[0]), 2.0));
    double osc = 0.0;
    for (int t = 0; t < n_tones; ++t)
      osc += q[1 + 3 * t] * std::cos(2.0 * M_PI * q[2 + 3 * t] * ts + q[3 + 3 * t]);
    return env * osc + q[q.size() - 1];
  };

  auto residuals = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd r(static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double ts = (data[i].tau_ns - tau0) / span;
      r[static_cast<Eigen::Index>(i)] =
          (model_scaled(q, ts) - data[i].p_s) * w[static_cast<Eigen::Index>(i)];
    }
    return r;
  };

  fit::LmResult lm = fit::levenberg_marquardt(residuals, p0);
  if (!lm.converged)
    throw std::runtime_error("fit: no convergence within iteration budget");

  // normalize: a >= 0, nu >= 0, phi in (-pi, pi]
  for (int t = 0; t < n_tones; ++t) {
    double& a = lm.params[1 + 3 * t];
    double& nu = lm.params[2 + 3 * t];
    double& phi = lm.params[3 + 3 * t];
    if (a < 0.0) {
      a = -a;
      phi += M_PI;
    }
    if (nu < 0.0) {
      nu = -nu;
      phi = -phi;
    }
    phi = wrap_phase(phi);
  }

  // covariance scaling to natural units; uniform weights pick up the
  // residual variance estimate
  bool have_sigma = false;
  for (const auto& pt : data) have_sigma = have_sigma || pt.stderr_p > 0.0;
  Eigen::MatrixXd cov = lm.covariance;
  if (!have_sigma) {
    const auto dof = static_cast<double>(data.size()) - static_cast<double>(np);
    if (dof > 0) cov *= lm.cost / dof;
  }
  Eigen::VectorXd scale(np);
  scale[0] = std::exp(lm.params[0]) * span;  // dT2/dlogT2 * span
  for (int t = 0; t < n_tones; ++t) {
    scale[1 + 3 * t] = 1.0;
    scale[2 + 3 * t] = 1.0 / span;  // nu in cycles/ns
    scale[3 + 3 * t] = 1.0;
  }
  scale[np - 1] = 1.0;
  cov = scale.asDiagonal() * cov * scale.asDiagonal();

  ToneFitRaw out;
  out.t2_ns = std::exp(lm.params[0]) * span;
  out.t2_err_ns = std::sqrt(std::max(cov(0, 0), 0.0));
  for (int t = 0; t < n_tones; ++t) {
    Tone tone;
    tone.a = lm.params[1 + 3 * t];
    tone.nu_mhz = lm.params[2 + 3 * t] / span * 1e3;  // cycles/ns -> MHz
    tone.phi_rad = lm.params[3 + 3 * t];
    tone.a_err = std::sqrt(std::max(cov(1 + 3 * t, 1 + 3 * t), 0.0));
    tone.nu_err_mhz = std::sqrt(std::max(cov(2 + 3 * t, 2 + 3 * t), 0.0)) * 1e3;
    tone.phi_err_rad = std::sqrt(std::max(cov(3 + 3 * t, 3 + 3 * t), 0.0));
    out.tones.push_back(tone);
  }
  out.c = lm.params[np - 1];
  out.c_err = std::sqrt(std::max(cov(np - 1, np - 1), 0.0));
  out.covariance = cov;
  out.cost_trace = lm.cost_trace;
  Eigen::VectorXd pf = lm.params;
  out.rms = residual_rms(data, [&](double tau_ns) {
    return model_scaled(pf, (tau_ns - tau0) / span);
  });
  return out;
}

}  // namespace detail

// Gaussian decay with offset, no oscillation: a exp(-(tau/T2)^2) + c.
struct EnvelopeFit {
  double a = 0.0;
  double t2_ns = 0.0;
  double t2_err_ns = 0.0;
  double c = 0.0;
  double residual_rms = 0.0;
};

inline EnvelopeFit fit_envelope(const ScanData& data) {
  if (data.size() < 4) throw std::invalid_argument("fit_envelope: need >= 4 points");
  const double span = data.back().tau_ns - data.front().tau_ns;
  const double tau0 = data.front().tau_ns;
  const Eigen::VectorXd w = detail::weights_of(data);

  double ymin = 1e300, ymax = -1e300;
  for (const auto& p : data) {
    ymin = std::min(ymin, p.p_s);
    ymax = std::max(ymax, p.p_s);
  }

  auto model = [&](const Eigen::VectorXd& q, double ts) {
    return q[0] * std::exp(-std::pow(ts / std::exp(q[1]), 2.0)) + q[2];
  };
  auto residuals = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd r(static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double ts = (data[i].tau_ns - tau0) / span;
      r[static_cast<Eigen::Index>(i)] =
          (model(q, ts) - data[i].p_s) * w[static_cast<Eigen::Index>(i)];
    }
    return r;
  };
  Eigen::VectorXd p0(3);
  p0 << std::max(ymax - ymin, 1e-6), std::log(0.5), ymin;
  const fit::LmResult lm = fit::levenberg_marquardt(residuals, p0);
  if (!lm.converged) throw std::runtime_error("fit_envelope: no convergence");

  EnvelopeFit out;
  out.a = lm.params[0];
  out.t2_ns = std::exp(lm.params[1]) * span;
  bool have_sigma = false;
  for (const auto& pt : data) have_sigma = have_sigma || pt.stderr_p > 0.0;
  double var = lm.covariance(1, 1);
  if (!have_sigma && data.size() > 3)
    var *= lm.cost / (static_cast<double>(data.size()) - 3.0);
  out.t2_err_ns = std::sqrt(std::max(var, 0.0)) * out.t2_ns;
  out.c = lm.params[2];
  Eigen::VectorXd pf = lm.params;
  out.residual_rms = detail::residual_rms(
      data, [&](double tau_ns) { return model(pf, (tau_ns - tau0) / span); });
  return out;
}

inline St0SingleToneFit fit_single_tone(const ScanData& data) {
  const auto raw = detail::fit_tones(data, 1);
  St0SingleToneFit out;
  out.t2_star_ns = raw.t2_ns;
  out.t2_star_err_ns = raw.t2_err_ns;
  out.tone = raw.tones[0];
  out.c = raw.c;
  out.c_err = raw.c_err;
  out.covariance = raw.covariance;
  out.residual_rms = raw.rms;
  out.cost_trace = raw.cost_trace;
  return out;
}

inline St0TwoToneFit fit_two_tone(const ScanData& data) {
  const auto spectrum = detail::spectral_peaks(data);
  const auto& peaks = spectrum.peaks;
  const double span = data.back().tau_ns - data.front().tau_ns;

  bool two_resolvable = peaks.size() >= 2;
  if (two_resolvable) {
    const double sep = std::abs(peaks[0].nu_per_ns - peaks[1].nu_per_ns);
    two_resolvable =
        peaks[1].magnitude >
            std::max(0.08 * peaks[0].magnitude, 6.0 * spectrum.floor) &&
        sep * span >= 0.9;
  }

  St0TwoToneFit out;
  if (!two_resolvable) {
    const auto single = fit_single_tone(data);
    out.single_tone_fallback = true;
    out.t2_star_ns = single.t2_star_ns;
    out.t2_star_err_ns = single.t2_star_err_ns;
    out.lt = single.tone;
    out.gt = Tone{};  // absent second component
    out.gt.nu_mhz = single.tone.nu_mhz;
    out.c = single.c;
    out.c_err = single.c_err;
    out.covariance = single.covariance;
    out.residual_rms = single.residual_rms;
    out.cost_trace = single.cost_trace;
    return out;
  }

  auto raw = detail::fit_tones(data, 2);
  // order tones by frequency; swap covariance blocks to match
  bool swapped = raw.tones[0].nu_mhz > raw.tones[1].nu_mhz;
  if (swapped) {
    std::swap(raw.tones[0], raw.tones[1]);
    Eigen::PermutationMatrix<8> perm;
    perm.setIdentity();
    for (int k = 0; k < 3; ++k) {
      perm.indices()[1 + k] = 4 + k;
      perm.indices()[4 + k] = 1 + k;
    }
    raw.covariance = perm.transpose() * raw.covariance * perm;
  }
  out.t2_star_ns = raw.t2_ns;
  out.t2_star_err_ns = raw.t2_err_ns;
  out.lt = raw.tones[0];
  out.gt = raw.tones[1];
  out.c = raw.c;
  out.c_err = raw.c_err;
  out.covariance = raw.covariance;
  out.residual_rms = raw.rms;
  out.cost_trace = raw.cost_trace;
  return out;
}

// --- motional-narrowing fit --------------------------------------------------

struct NarrowingPoint {
  double d_nm = 0.0;
  double t2_ns = 0.0;
  double stderr_ns = 0.0;
};

struct NarrowingFit {
  double t2l_ns = 0.0, t2l_err_ns = 0.0;
  double t2r_ns = 0.0, t2r_err_ns = 0.0;
  double lc_nm = 0.0, lc_err_nm = 0.0;
  Eigen::Matrix3d covariance;  // order: T2L, T2R, lc (natural units)
  bool lc_identifiable = true;
  std::vector<double> cost_trace;
};

inline double narrowing_t2_ns(double t2l_ns, double t2r_ns, double lc_nm, double d_nm) {
  const double inv2 = 1.0 / (t2l_ns * t2l_ns) +
                      1.0 / (t2r_ns * t2r_ns) * lc_nm / (d_nm + lc_nm);
  return 1.0 / std::sqrt(inv2);
}

// Weighted least squares on y = (1/T2*)^2; parameters are fitted in log
// space so they stay positive.
inline NarrowingFit fit_narrowing(const std::vector<NarrowingPoint>& points) {
  if (points.size() < 4)
    throw std::invalid_argument("fit_narrowing: need >= 4 points");
  {
    double dmin = 1e300, dmax = -1e300;
    for (const auto& p : points) {
      dmin = std::min(dmin, p.d_nm);
      dmax = std::max(dmax, p.d_nm);
    }
    if (!(dmax > dmin))
      throw std::invalid_argument("fit_narrowing: degenerate design, all d equal");
  }

  const auto n = points.size();
  Eigen::VectorXd y(static_cast<Eigen::Index>(n)), w(static_cast<Eigen::Index>(n));
  bool have_sigma = false;
  for (const auto& p : points) have_sigma = have_sigma || p.stderr_ns > 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t2 = points[i].t2_ns;
    if (t2 <= 0.0) throw std::invalid_argument("fit_narrowing: T2 must be > 0");
    y[static_cast<Eigen::Index>(i)] = 1.0 / (t2 * t2);
    const double sig_y = have_sigma
                             ? 2.0 * std::max(points[i].stderr_ns, 1e-9) / (t2 * t2 * t2)
                             : 1.0 / (t2 * t2);  // ~constant relative weight
    w[static_cast<Eigen::Index>(i)] = 1.0 / sig_y;
  }

  // initialization: plateau at large d -> A, excess at small d -> B
  double y_at_dmax = y[0], y_at_dmin = y[0], dmax = points[0].d_nm, dmin = points[0].d_nm;
  for (std::size_t i = 0; i < n; ++i) {
    if (points[i].d_nm >= dmax) {
      dmax = points[i].d_nm;
      y_at_dmax = y[static_cast<Eigen::Index>(i)];
    }
    if (points[i].d_nm <= dmin) {
      dmin = points[i].d_nm;
      y_at_dmin = y[static_cast<Eigen::Index>(i)];
    }
  }
  const double a0 = std::max(0.8 * y_at_dmax, 1e-12);
  const double b0 = std::max(y_at_dmin - a0, 0.1 * a0);

  auto residuals = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd r(static_cast<Eigen::Index>(n));
    const double a = std::exp(q[0]), b = std::exp(q[1]), lc = std::exp(q[2]);
    for (std::size_t i = 0; i < n; ++i)
      r[static_cast<Eigen::Index>(i)] =
          (a + b * lc / (points[i].d_nm + lc) - y[static_cast<Eigen::Index>(i)]) *
          w[static_cast<Eigen::Index>(i)];
    return r;
  };
  Eigen::VectorXd p0(3);
  p0 << std::log(a0), std::log(b0), std::log(std::max(0.05 * (dmax - dmin), 1.0));
  const fit::LmResult lm = fit::levenberg_marquardt(residuals, p0);
  if (!lm.converged) throw std::runtime_error("fit_narrowing: no convergence");

  const double a = std::exp(lm.params[0]);
  const double b = std::exp(lm.params[1]);
  const double lc = std::exp(lm.params[2]);

  NarrowingFit out;
  out.t2l_ns = 1.0 / std::sqrt(a);
  out.t2r_ns = 1.0 / std::sqrt(b);
  out.lc_nm = lc;
  out.cost_trace = lm.cost_trace;

  Eigen::MatrixXd cov = lm.covariance;
  if (!have_sigma && n > 3)
    cov *= lm.cost / (static_cast<double>(n) - 3.0);
  // delta method: dT2L/dlogA = -T2L/2, dT2R/dlogB = -T2R/2, dlc/dloglc = lc
  Eigen::Vector3d scale(-0.5 * out.t2l_ns, -0.5 * out.t2r_ns, lc);
  out.covariance = scale.asDiagonal() * cov * scale.asDiagonal();
  out.t2l_err_ns = std::sqrt(std::max(out.covariance(0, 0), 0.0));
  out.t2r_err_ns = std::sqrt(std::max(out.covariance(1, 1), 0.0));
  out.lc_err_nm = std::sqrt(std::max(out.covariance(2, 2), 0.0));

  // identifiability: the narrowing term must move by more than the data
  // scatter across the sampled d range
  double med_sig = 0.0;
  {
    std::vector<double> sig;
    for (std::size_t i = 0; i < n; ++i) sig.push_back(1.0 / w[static_cast<Eigen::Index>(i)]);
    std::sort(sig.begin(), sig.end());
    med_sig = sig[sig.size() / 2];
  }
  const double swing = b * (lc / (dmin + lc) - lc / (dmax + lc));
  out.lc_identifiable = swing > 2.0 * med_sig && out.lc_err_nm < out.lc_nm;
  return out;
}

// --- frequency ratios --------------------------------------------------------

struct FrequencyPoint {
  double d_nm = 0.0;
  double nu_mhz = 0.0;
  double err_mhz = 0.0;
};

struct RatioEntry {
  double d_nm = 0.0;
  double ratio = 0.0;
  double err = 0.0;
};

// Pairwise nu(B_num)/nu(B_den) on matched d grids with propagated errors.
inline std::vector<RatioEntry> frequency_ratio_report(
    const std::vector<FrequencyPoint>& numerator,
    const std::vector<FrequencyPoint>& denominator) {
  if (numerator.size() != denominator.size())
    throw std::invalid_argument("frequency_ratio_report: grids differ in size");
  std::vector<RatioEntry> out;
  for (std::size_t i = 0; i < numerator.size(); ++i) {
    if (std::abs(numerator[i].d_nm - denominator[i].d_nm) > 1e-9)
      throw std::invalid_argument("frequency_ratio_report: d grids mismatch");
    RatioEntry e;
    e.d_nm = numerator[i].d_nm;
    if (denominator[i].nu_mhz == 0.0)
      throw std::invalid_argument("frequency_ratio_report: zero denominator frequency");
    e.ratio = numerator[i].nu_mhz / denominator[i].nu_mhz;
    const double rel_n = numerator[i].nu_mhz != 0.0
                             ? numerator[i].err_mhz / numerator[i].nu_mhz
                             : 0.0;
    const double rel_d = denominator[i].err_mhz / denominator[i].nu_mhz;
    e.err = std::abs(e.ratio) * std::sqrt(rel_n * rel_n + rel_d * rel_d);
    out.push_back(e);
  }
  return out;
}

}  // namespace shuttlesim
