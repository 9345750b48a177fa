#pragma once

// Shot-level SET readout: Gaussian current model conditioned on the
// electron filling, two-Gaussian histogram fit whose crossing point
// defines the classification threshold, singlet fractions and the
// charge-shuttle success counting (first measurement three electrons,
// second measurement four).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "shuttlesim/lm.hpp"
#include "shuttlesim/random.hpp"

namespace shuttlesim {

enum class Filling { three_electrons, four_electrons };
enum class MeasureStage { m_after_forward, m_after_return };

struct ShotRecord {
  double i_set = 0.0;  // SET current, arbitrary units
  MeasureStage stage = MeasureStage::m_after_return;
  std::uint64_t cycle_index = 0;
  std::optional<Filling> truth;  // simulation ground truth
};

struct SetNoiseModel {
  double mu3 = 0.0;
  double sigma3 = 1.0;
  double mu4 = 1.0;
  double sigma4 = 1.0;  // the four-electron peak may be narrower

  void validate() const {
    if (sigma3 < 0.0 || sigma4 < 0.0)
      throw std::invalid_argument("SetNoiseModel: sigmas must be >= 0");
  }
};

// sigma = 0 draws the mean exactly (the Gaussian draw is still consumed,
// keeping seeded streams aligned across noise settings).
inline double draw_current(Filling truth, const SetNoiseModel& noise,
                           GaussianSampler& gauss) {
  noise.validate();
  return truth == Filling::three_electrons ? noise.mu3 + noise.sigma3 * gauss()
                                           : noise.mu4 + noise.sigma4 * gauss();
}

inline ShotRecord simulate_shot(Filling truth, const SetNoiseModel& noise,
                                std::uint64_t seed) {
  GaussianSampler gauss(seed);
  ShotRecord rec;
  rec.i_set = draw_current(truth, noise, gauss);
  rec.truth = truth;
  return rec;
}

struct GaussComponent {
  double amplitude = 0.0;  // peak height of the fitted curve
  double mean = 0.0;
  double sigma = 0.0;
};

struct SetHistogram {
  std::vector<double> bin_edges;
  std::vector<double> counts;
  GaussComponent lower;  // smaller mean
  GaussComponent upper;  // larger mean
  double threshold = 0.0;
};

// Crossing point of two Gaussian bumps between their means. Throws when no
// crossing lies strictly between them.
inline double gaussian_crossing(const GaussComponent& g1, const GaussComponent& g2) {
  const GaussComponent& lo = g1.mean <= g2.mean ? g1 : g2;
  const GaussComponent& hi = g1.mean <= g2.mean ? g2 : g1;
  if (lo.amplitude <= 0.0 || hi.amplitude <= 0.0 || lo.sigma <= 0.0 || hi.sigma <= 0.0)
    throw std::invalid_argument("gaussian_crossing: degenerate components");

  // log f_lo(x) = log f_hi(x) -> quadratic in x
  const double alpha = 0.5 / (hi.sigma * hi.sigma) - 0.5 / (lo.sigma * lo.sigma);
  const double beta = lo.mean / (lo.sigma * lo.sigma) - hi.mean / (hi.sigma * hi.sigma);
  const double gamma = 0.5 * hi.mean * hi.mean / (hi.sigma * hi.sigma) -
                       0.5 * lo.mean * lo.mean / (lo.sigma * lo.sigma) -
                       std::log(hi.amplitude / lo.amplitude);
  std::vector<double> roots;
  if (std::abs(alpha) < 1e-14 * (1.0 / (lo.sigma * lo.sigma))) {
    if (beta != 0.0) roots.push_back(-gamma / beta);
  } else {
    const double disc = beta * beta - 4.0 * alpha * gamma;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      roots.push_back((-beta + sq) / (2.0 * alpha));
      roots.push_back((-beta - sq) / (2.0 * alpha));
    }
  }
  for (const double r : roots)
    if (r > lo.mean && r < hi.mean) return r;
  throw std::runtime_error("gaussian_crossing: crossing point outside (mu1, mu2)");
}

namespace detail {

// Deterministic two-cluster split of sorted currents (1-D k-means): the
// boundary iterates to the midpoint of the cluster means.
struct TwoSplit {
  double mean_lo, sigma_lo, weight_lo;
  double mean_hi, sigma_hi, weight_hi;
};

inline TwoSplit two_means_split(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  std::vector<double> prefix(n + 1, 0.0), prefix2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    prefix[i + 1] = prefix[i] + values[i];
    prefix2[i + 1] = prefix2[i] + values[i] * values[i];
  }
  std::size_t split = n / 2;
  for (int iter = 0; iter < 64; ++iter) {
    const double m_lo = prefix[split] / static_cast<double>(split);
    const double m_hi = (prefix[n] - prefix[split]) / static_cast<double>(n - split);
    const double boundary = 0.5 * (m_lo + m_hi);
    const auto new_split = static_cast<std::size_t>(
        std::lower_bound(values.begin(), values.end(), boundary) - values.begin());
    if (new_split == split || new_split == 0 || new_split == n) break;
    split = new_split;
  }
  auto moments = [&](std::size_t a, std::size_t b) {
    const auto cnt = static_cast<double>(b - a);
    const double m = (prefix[b] - prefix[a]) / cnt;
    const double v = std::max((prefix2[b] - prefix2[a]) / cnt - m * m, 1e-300);
    return std::pair<double, double>(m, std::sqrt(v));
  };
  TwoSplit s{};
  std::tie(s.mean_lo, s.sigma_lo) = moments(0, split);
  std::tie(s.mean_hi, s.sigma_hi) = moments(split, n);
  s.weight_lo = static_cast<double>(split) / static_cast<double>(n);
  s.weight_hi = 1.0 - s.weight_lo;
  return s;
}

}  // namespace detail

// Histogram the currents (Freedman-Diaconis width, at least 40 bins), fit
// a two-Gaussian mixture by least squares on the binned counts and take
// the crossing point between the means as the threshold. Deterministic:
// identical shots give a bit-identical threshold.
inline SetHistogram fit_threshold(const std::vector<ShotRecord>& shots) {
  if (shots.size() < 1000)
    throw std::invalid_argument("fit_threshold: need >= 1000 shots");
  std::vector<double> values;
  values.reserve(shots.size());
  for (const auto& s : shots) values.push_back(s.i_set);
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());

  const double lo = sorted.front(), hi = sorted.back();
  if (!(hi > lo)) throw std::invalid_argument("fit_threshold: all currents equal");
  const double iqr =
      sorted[(3 * sorted.size()) / 4] - sorted[sorted.size() / 4];
  const double fd_width =
      2.0 * std::max(iqr, 1e-12 * (hi - lo)) /
      std::cbrt(static_cast<double>(sorted.size()));
  const auto n_bins = std::max<std::size_t>(
      40, static_cast<std::size_t>(std::ceil((hi - lo) / fd_width)));

  SetHistogram hist;
  hist.bin_edges.resize(n_bins + 1);
  hist.counts.assign(n_bins, 0.0);
  const double width = (hi - lo) / static_cast<double>(n_bins);
  for (std::size_t b = 0; b <= n_bins; ++b)
    hist.bin_edges[b] = lo + static_cast<double>(b) * width;
  for (const double v : values) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    hist.counts[std::min(b, n_bins - 1)] += 1.0;
  }

  // bimodality gate: the smoothed histogram must show two maxima
  std::vector<double> smooth(n_bins, 0.0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    double acc = 0.0;
    int cnt = 0;
    for (int k = -2; k <= 2; ++k) {
      const auto j = static_cast<long>(b) + k;
      if (j >= 0 && j < static_cast<long>(n_bins)) {
        acc += hist.counts[static_cast<std::size_t>(j)];
        ++cnt;
      }
    }
    smooth[b] = acc / cnt;
  }
  const double peak_floor = 0.02 * *std::max_element(smooth.begin(), smooth.end());
  int n_maxima = 0;
  for (std::size_t b = 1; b + 1 < n_bins; ++b)
    if (smooth[b] > peak_floor && smooth[b] > smooth[b - 1] && smooth[b] >= smooth[b + 1])
      ++n_maxima;
  if (n_maxima < 2)
    throw std::runtime_error("fit_threshold: histogram is not bimodal");

  const auto init = detail::two_means_split(values);
  // parameters: log A1, mu1, log s1, log A2, mu2, log s2
  Eigen::VectorXd p0(6);
  const double bin_scale = width * static_cast<double>(values.size());
  p0 << std::log(std::max(init.weight_lo * bin_scale / (init.sigma_lo * std::sqrt(2.0 * M_PI)), 1e-6)),
      init.mean_lo, std::log(init.sigma_lo),
      std::log(std::max(init.weight_hi * bin_scale / (init.sigma_hi * std::sqrt(2.0 * M_PI)), 1e-6)),
      init.mean_hi, std::log(init.sigma_hi);

  std::vector<double> centers(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b)
    centers[b] = 0.5 * (hist.bin_edges[b] + hist.bin_edges[b + 1]);

  auto residuals = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd r(static_cast<Eigen::Index>(n_bins));
    const double a1 = std::exp(q[0]), m1 = q[1], s1 = std::exp(q[2]);
    const double a2 = std::exp(q[3]), m2 = q[4], s2 = std::exp(q[5]);
    for (std::size_t b = 0; b < n_bins; ++b) {
      const double z1 = (centers[b] - m1) / s1;
      const double z2 = (centers[b] - m2) / s2;
      const double model = a1 * std::exp(-0.5 * z1 * z1) + a2 * std::exp(-0.5 * z2 * z2);
      r[static_cast<Eigen::Index>(b)] = model - hist.counts[b];
    }
    return r;
  };
  const fit::LmResult lm = fit::levenberg_marquardt(residuals, p0);
  if (!lm.converged) throw std::runtime_error("fit_threshold: fit did not converge");

  GaussComponent c1{std::exp(lm.params[0]), lm.params[1], std::exp(lm.params[2])};
  GaussComponent c2{std::exp(lm.params[3]), lm.params[4], std::exp(lm.params[5])};
  if (c1.mean > c2.mean) std::swap(c1, c2);
  hist.lower = c1;
  hist.upper = c2;
  hist.threshold = gaussian_crossing(c1, c2);
  return hist;
}

inline Filling classify(double i_set, double threshold, bool four_is_upper) {
  const bool upper = i_set >= threshold;
  return upper == four_is_upper ? Filling::four_electrons : Filling::three_electrons;
}

// --- fidelity and singlet statistics ------------------------------------------

// Wilson score interval at z standard deviations.
inline std::pair<double, double> wilson_interval(std::uint64_t successes,
                                                 std::uint64_t n, double z = 1.0) {
  if (n == 0) throw std::invalid_argument("wilson_interval: n must be > 0");
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half =
      z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  return {center - half, center + half};
}

struct FidelityResult {
  double fidelity = 0.0;
  double wilson_lo = 0.0;
  double wilson_hi = 0.0;
  std::uint64_t n_cycles = 0;
  std::uint64_t n_success = 0;
};

// Per-cycle success counting: the forward measurement must read three
// electrons (the electron left the detector dot) and the return
// measurement four (it came back). Cycle order is irrelevant.
inline FidelityResult charge_fidelity(const std::vector<ShotRecord>& shots,
                                      double threshold, bool four_is_upper) {
  struct Legs {
    std::optional<Filling> forward, ret;
  };
  std::map<std::uint64_t, Legs> cycles;
  for (const auto& s : shots) {
    auto& legs = cycles[s.cycle_index];
    auto& slot = s.stage == MeasureStage::m_after_forward ? legs.forward : legs.ret;
    if (slot.has_value())
      throw std::invalid_argument("charge_fidelity: duplicate stage in cycle " +
                                  std::to_string(s.cycle_index));
    slot = classify(s.i_set, threshold, four_is_upper);
  }
  FidelityResult res;
  for (const auto& [idx, legs] : cycles) {
    if (!legs.forward.has_value() || !legs.ret.has_value())
      throw std::invalid_argument("charge_fidelity: unpaired cycle " +
                                  std::to_string(idx));
    ++res.n_cycles;
    if (*legs.forward == Filling::three_electrons &&
        *legs.ret == Filling::four_electrons)
      ++res.n_success;
  }
  if (res.n_cycles == 0)
    throw std::invalid_argument("charge_fidelity: no cycles");
  res.fidelity = static_cast<double>(res.n_success) / static_cast<double>(res.n_cycles);
  std::tie(res.wilson_lo, res.wilson_hi) = wilson_interval(res.n_success, res.n_cycles);
  return res;
}

struct SingletFraction {
  double p_s = 0.0;
  double stderr_p = 0.0;
  std::uint64_t n_shots = 0;
};

// Fraction of PSB-frozen shots on the four-electron (singlet) side.
inline SingletFraction singlet_fraction(const std::vector<ShotRecord>& shots,
                                        double threshold, bool four_is_upper) {
  if (shots.empty())
    throw std::invalid_argument("singlet_fraction: no shots");
  std::uint64_t singlets = 0;
  for (const auto& s : shots)
    if (classify(s.i_set, threshold, four_is_upper) == Filling::four_electrons)
      ++singlets;
  SingletFraction res;
  res.n_shots = shots.size();
  res.p_s = static_cast<double>(singlets) / static_cast<double>(shots.size());
  res.stderr_p = std::sqrt(res.p_s * (1.0 - res.p_s) /
                           static_cast<double>(shots.size()));
  return res;
}

}  // namespace shuttlesim
