#pragma once

// Spatially correlated quasistatic disorder along the shuttle channel:
// the g-factor difference dg(x) and the Overhauser-energy difference
// E_hf(x) between the moving dot at x and the static dot. Fields are
// stationary Gaussian processes with covariance
//   Cov(x, x') = sigma^2 * k(|x - x'| / l_c)
// sampled on a uniform grid by circulant embedding, which reproduces the
// target covariance exactly on the grid nodes.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "shuttlesim/fft.hpp"
#include "shuttlesim/io.hpp"
#include "shuttlesim/random.hpp"

namespace shuttlesim {

enum class CorrelationKernel { exponential, gaussian };

inline std::string to_string(CorrelationKernel k) {
  return k == CorrelationKernel::exponential ? "exponential" : "gaussian";
}

inline CorrelationKernel kernel_from_string(const std::string& s) {
  if (s == "exponential") return CorrelationKernel::exponential;
  if (s == "gaussian") return CorrelationKernel::gaussian;
  throw std::invalid_argument("unknown correlation kernel: " + s);
}

// Normalized correlation k(u), u = distance / l_c. k(0) = 1.
inline double kernel_value(CorrelationKernel kernel, double u) {
  switch (kernel) {
    case CorrelationKernel::exponential:
      return std::exp(-std::abs(u));
    case CorrelationKernel::gaussian:
      return std::exp(-u * u);
  }
  return 0.0;
}

struct DisorderSpec {
  double grid_step_nm = 1.0;
  double channel_length_nm = 400.0;
  double sigma_dg = 0.0;            // std. dev. of dg(x), dimensionless
  double mean_dg = 6.51e-4;
  double sigma_hf_nev = 0.0;        // std. dev. of E_hf(x), neV
  double mean_hf_nev = 0.0;
  double correlation_length_nm = 13.0;
  CorrelationKernel kernel = CorrelationKernel::exponential;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(grid_step_nm > 0.0))
      throw std::invalid_argument("DisorderSpec: grid_step_nm must be > 0");
    if (!(channel_length_nm >= grid_step_nm))
      throw std::invalid_argument(
          "DisorderSpec: channel_length_nm must be >= grid_step_nm");
    if (!(correlation_length_nm > 0.0))
      throw std::invalid_argument(
          "DisorderSpec: correlation_length_nm must be > 0");
    if (sigma_dg < 0.0 || sigma_hf_nev < 0.0)
      throw std::invalid_argument("DisorderSpec: sigmas must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"grid_step_nm", grid_step_nm},
            {"channel_length_nm", channel_length_nm},
            {"sigma_dg", sigma_dg},
            {"mean_dg", mean_dg},
            {"sigma_hf_nev", sigma_hf_nev},
            {"mean_hf_nev", mean_hf_nev},
            {"correlation_length_nm", correlation_length_nm},
            {"kernel", to_string(kernel)},
            {"seed", seed}};
  }

  static DisorderSpec from_json(const nlohmann::json& j) {
    DisorderSpec s;
    s.grid_step_nm = j.at("grid_step_nm").get<double>();
    s.channel_length_nm = j.at("channel_length_nm").get<double>();
    s.sigma_dg = j.at("sigma_dg").get<double>();
    s.mean_dg = j.at("mean_dg").get<double>();
    s.sigma_hf_nev = j.at("sigma_hf_nev").get<double>();
    s.mean_hf_nev = j.value("mean_hf_nev", 0.0);
    s.correlation_length_nm = j.at("correlation_length_nm").get<double>();
    s.kernel = kernel_from_string(j.at("kernel").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  }
};

namespace detail {

// Square roots of the circulant-embedding eigenvalues for a grid of n
// nodes. The exponential kernel embeds nonnegatively at minimal size; the
// gaussian kernel may need padding. Embeddings are deterministic in
// (n, dx/lc, kernel), so they are memoized across realizations.
inline std::shared_ptr<const std::vector<double>> embedding_amplitudes(
    std::size_t n, double dx_over_lc, CorrelationKernel kernel) {
  struct Key {
    std::size_t n;
    double ratio;
    int kernel;
    bool operator<(const Key& o) const {
      return std::tie(n, ratio, kernel) < std::tie(o.n, o.ratio, o.kernel);
    }
  };
  static std::mutex cache_mutex;
  static std::map<Key, std::shared_ptr<const std::vector<double>>> cache;
  const Key key{n, dx_over_lc, static_cast<int>(kernel)};
  {
    std::lock_guard<std::mutex> lock(cache_mutex);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
  }

  std::size_t m = next_pow2(std::max<std::size_t>(2 * (n - 1), 2));
  std::shared_ptr<const std::vector<double>> result;
  for (;;) {
    std::vector<std::complex<double>> lambda(m);
    for (std::size_t j = 0; j < m; ++j) {
      const double lag = static_cast<double>(std::min(j, m - j)) * dx_over_lc;
      lambda[j] = kernel_value(kernel, lag);
    }
    fft(lambda);

    double min_ev = 0.0, max_ev = 0.0;
    for (const auto& l : lambda) {
      min_ev = std::min(min_ev, l.real());
      max_ev = std::max(max_ev, l.real());
    }
    if (min_ev < -1e-9 * max_ev) {
      if (m >= (std::size_t{1} << 26))
        throw std::runtime_error(
            "circulant embedding failed: covariance not embeddable");
      m <<= 1;
      continue;
    }
    auto amps = std::make_shared<std::vector<double>>(m);
    for (std::size_t k = 0; k < m; ++k)
      (*amps)[k] = std::sqrt(std::max(lambda[k].real(), 0.0));
    result = std::move(amps);
    break;
  }
  std::lock_guard<std::mutex> lock(cache_mutex);
  cache.emplace(key, result);
  return result;
}

// Unit-variance stationary Gaussian field on n uniform nodes via
// circulant embedding (Dietrich & Newsam).
inline std::vector<double> correlated_unit_field(std::size_t n,
                                                 double dx_over_lc,
                                                 CorrelationKernel kernel,
                                                 std::uint64_t seed) {
  const auto amps = embedding_amplitudes(n, dx_over_lc, kernel);
  const std::size_t m = amps->size();
  GaussianSampler gauss(seed);
  std::vector<std::complex<double>> zeta(m);
  for (std::size_t k = 0; k < m; ++k) {
    const double re = gauss();
    const double im = gauss();
    zeta[k] = std::complex<double>((*amps)[k] * re, (*amps)[k] * im);
  }
  fft(zeta);
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = zeta[i].real() * scale;
  return out;
}

}  // namespace detail

struct ZeemanLandscape {
  std::vector<double> positions_nm;  // uniform, strictly increasing
  std::vector<double> dg_values;     // dimensionless
  std::vector<double> hf_values_nev; // neV
  DisorderSpec spec;

  std::size_t size() const { return positions_nm.size(); }
  double span_nm() const { return positions_nm.empty() ? 0.0 : positions_nm.back(); }

  void check_consistent() const {
    if (positions_nm.size() < 2 || dg_values.size() != positions_nm.size() ||
        hf_values_nev.size() != positions_nm.size())
      throw std::invalid_argument("ZeemanLandscape: array sizes inconsistent");
    const double dx = spec.grid_step_nm;
    for (std::size_t i = 1; i < positions_nm.size(); ++i) {
      const double step = positions_nm[i] - positions_nm[i - 1];
      if (std::abs(step - dx) > 1e-9 * dx)
        throw std::invalid_argument(
            "ZeemanLandscape: positions not uniform at grid_step_nm");
    }
  }

  struct FieldValue {
    double dg;
    double hf_nev;
  };

  // Linear interpolation between grid nodes; exact at nodes. x outside
  // [0, span] is an error, never an extrapolation.
  FieldValue field_at(double x_nm) const {
    const double dx = spec.grid_step_nm;
    const double slack = 1e-9 * dx;
    if (x_nm < -slack || x_nm > span_nm() + slack)
      throw std::out_of_range("field_at: x outside landscape");
    const double xc = std::clamp(x_nm, 0.0, span_nm());
    const double u = xc / dx;
    std::size_t i = std::min(static_cast<std::size_t>(u), size() - 2);
    const double frac = u - static_cast<double>(i);
    return {dg_values[i] + frac * (dg_values[i + 1] - dg_values[i]),
            hf_values_nev[i] + frac * (hf_values_nev[i + 1] - hf_values_nev[i])};
  }

  // (1/d) * integral over [x0, x0+d] of each field (trapezoidal, exact for
  // the piecewise-linear interpolant). d = 0 returns field_at(x0).
  FieldValue window_average(double x0_nm, double d_nm) const {
    if (d_nm < 0.0) throw std::invalid_argument("window_average: d must be >= 0");
    const double slack = 1e-9 * spec.grid_step_nm;
    if (x0_nm < -slack || x0_nm + d_nm > span_nm() + slack)
      throw std::out_of_range("window_average: window exceeds landscape");
    if (d_nm == 0.0) return field_at(x0_nm);
    const double inv_d = 1.0 / d_nm;
    return {integrate(dg_values, x0_nm, x0_nm + d_nm) * inv_d,
            integrate(hf_values_nev, x0_nm, x0_nm + d_nm) * inv_d};
  }

 private:
  double interp(const std::vector<double>& f, double x_nm) const {
    const double u = std::clamp(x_nm, 0.0, span_nm()) / spec.grid_step_nm;
    std::size_t i = std::min(static_cast<std::size_t>(u), size() - 2);
    const double frac = u - static_cast<double>(i);
    return f[i] + frac * (f[i + 1] - f[i]);
  }

  double integrate(const std::vector<double>& f, double a, double b) const {
    const double dx = spec.grid_step_nm;
    const std::size_t ia = std::min(static_cast<std::size_t>(std::clamp(a, 0.0, span_nm()) / dx), size() - 2);
    const std::size_t ib = std::min(static_cast<std::size_t>(std::clamp(b, 0.0, span_nm()) / dx), size() - 2);
    if (ia == ib)
      return (b - a) * 0.5 * (interp(f, a) + interp(f, b));
    double total = 0.0;
    // leading partial cell
    const double xa_end = positions_nm[ia + 1];
    total += (xa_end - a) * 0.5 * (interp(f, a) + f[ia + 1]);
    // full interior cells
    for (std::size_t i = ia + 1; i < ib; ++i)
      total += dx * 0.5 * (f[i] + f[i + 1]);
    // trailing partial cell
    const double xb_start = positions_nm[ib];
    total += (b - xb_start) * 0.5 * (f[ib] + interp(f, b));
    return total;
  }
};

// Draws both disorder fields. Deterministic for a fixed spec/seed; the dg
// and hf fields use distinct sub-seeds and are independent.
inline ZeemanLandscape generate_landscape(const DisorderSpec& spec) {
  spec.validate();
  const std::size_t n = static_cast<std::size_t>(std::ceil(
                            spec.channel_length_nm / spec.grid_step_nm - 1e-9)) + 1;
  ZeemanLandscape land;
  land.spec = spec;
  land.positions_nm.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    land.positions_nm[i] = static_cast<double>(i) * spec.grid_step_nm;

  const double dx_over_lc = spec.grid_step_nm / spec.correlation_length_nm;
  land.dg_values.assign(n, spec.mean_dg);
  if (spec.sigma_dg > 0.0) {
    const auto unit = detail::correlated_unit_field(n, dx_over_lc, spec.kernel,
                                                    mix_seed(spec.seed, 1));
    for (std::size_t i = 0; i < n; ++i)
      land.dg_values[i] += spec.sigma_dg * unit[i];
  }
  land.hf_values_nev.assign(n, spec.mean_hf_nev);
  if (spec.sigma_hf_nev > 0.0) {
    const auto unit = detail::correlated_unit_field(n, dx_over_lc, spec.kernel,
                                                    mix_seed(spec.seed, 2));
    for (std::size_t i = 0; i < n; ++i)
      land.hf_values_nev[i] += spec.sigma_hf_nev * unit[i];
  }
  return land;
}

// --- CSV export/import (spec echoed as JSON sidecar) -----------------------

inline std::string landscape_to_csv(const ZeemanLandscape& land) {
  io::CsvTable t;
  t.header = {"x_nm", "dg", "hf_neV"};
  t.rows.reserve(land.size());
  for (std::size_t i = 0; i < land.size(); ++i)
    t.rows.push_back({land.positions_nm[i], land.dg_values[i], land.hf_values_nev[i]});
  return io::to_csv(t);
}

inline void export_landscape(const ZeemanLandscape& land, const std::string& csv_path) {
  io::write_file(csv_path, landscape_to_csv(land));
  io::write_file(csv_path + ".spec.json", land.spec.to_json().dump(2) + "\n");
}

inline ZeemanLandscape landscape_from_csv(const std::string& csv_text,
                                          const DisorderSpec& spec) {
  const auto t = io::parse_csv(csv_text);
  if (t.header != std::vector<std::string>{"x_nm", "dg", "hf_neV"})
    throw std::runtime_error("landscape csv: expected header x_nm,dg,hf_neV");
  ZeemanLandscape land;
  land.spec = spec;
  for (const auto& row : t.rows) {
    land.positions_nm.push_back(row[0]);
    land.dg_values.push_back(row[1]);
    land.hf_values_nev.push_back(row[2]);
  }
  land.check_consistent();
  return land;
}

inline ZeemanLandscape import_landscape(const std::string& csv_path) {
  const auto spec = DisorderSpec::from_json(
      nlohmann::json::parse(io::read_file(csv_path + ".spec.json")));
  return landscape_from_csv(io::read_file(csv_path), spec);
}

}  // namespace shuttlesim
