#pragma once

// Physical constants and unit conversions used throughout the library.
//
// Internal convention: energies in eV, times in seconds, lengths in
// meters, frequencies in Hz. Public interfaces speak ns / nm / MHz / T /
// neV and convert at the boundary through the helpers below.

#include <cmath>

namespace shuttlesim {

struct PhysicalConstants {
  // Planck constant, eV s (CODATA, exact since 2019 SI)
  static constexpr double h_ev_s = 4.135667696e-15;
  // Bohr magneton, eV/T
  static constexpr double mu_b_ev_per_t = 5.7883818060e-5;

  static constexpr double hbar_ev_s() { return h_ev_s / (2.0 * M_PI); }
};

namespace units {

constexpr double nm_to_m = 1e-9;
constexpr double m_to_nm = 1e9;
constexpr double ns_to_s = 1e-9;
constexpr double s_to_ns = 1e9;
constexpr double nev_to_ev = 1e-9;
constexpr double ev_to_nev = 1e9;
constexpr double mhz_to_hz = 1e6;
constexpr double hz_to_mhz = 1e-6;

}  // namespace units

// Zeeman splitting difference (eV) for a g-factor difference at field b_t.
inline double zeeman_energy_ev(double dg, double b_t) {
  return dg * PhysicalConstants::mu_b_ev_per_t * b_t;
}

// ST0 precession frequency (Hz) for a Zeeman-energy difference in eV.
inline double frequency_hz_from_energy_ev(double delta_ev) {
  return delta_ev / PhysicalConstants::h_ev_s;
}

// g-factor difference that produces a given ST0 frequency at field b_t.
inline double dg_for_frequency(double nu_hz, double b_t) {
  return nu_hz * PhysicalConstants::h_ev_s /
         (PhysicalConstants::mu_b_ev_per_t * b_t);
}

// Gaussian-decay dephasing time (s) of <cos(2 pi nu t)> when nu is normal
// with standard deviation sigma_nu_hz: envelope exp(-2 pi^2 sigma^2 t^2)
// = exp(-(t/T2)^2) with 1/T2 = sqrt(2) pi sigma.
inline double t2_s_from_sigma_nu_hz(double sigma_nu_hz) {
  return 1.0 / (std::sqrt(2.0) * M_PI * sigma_nu_hz);
}

inline double sigma_nu_hz_from_t2_s(double t2_s) {
  return 1.0 / (std::sqrt(2.0) * M_PI * t2_s);
}

// Hyperfine-energy spread (neV) that yields a given T2* (ns) at d = 0.
inline double sigma_hf_nev_for_t2_ns(double t2_ns) {
  const double sigma_nu = sigma_nu_hz_from_t2_s(t2_ns * units::ns_to_s);
  return sigma_nu * PhysicalConstants::h_ev_s * units::ev_to_nev;
}

}  // namespace shuttlesim
