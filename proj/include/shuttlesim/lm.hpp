#pragma once

// Compact damped least-squares (Levenberg-Marquardt) engine used by the
// curve fits. Residual callbacks return the weighted residual vector; the
// Jacobian is taken by central differences. Accepted steps never increase
// the cost, and the accepted-cost trace is kept for inspection.

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <vector>

namespace shuttlesim::fit {

using ResidualFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

struct LmOptions {
  int max_iterations = 400;
  double initial_damping = 1e-3;
  double ftol = 1e-14;   // relative cost improvement
  double gtol = 1e-12;   // gradient infinity norm (scaled)
};

struct LmResult {
  Eigen::VectorXd params;
  Eigen::MatrixXd covariance;      // (J^T J)^-1 at the optimum
  double cost = 0.0;               // sum of squared weighted residuals
  std::vector<double> cost_trace;  // accepted steps only, non-increasing
  int iterations = 0;
  bool converged = false;
};

inline Eigen::MatrixXd numeric_jacobian(const ResidualFn& f, const Eigen::VectorXd& p,
                                        const Eigen::VectorXd& r0) {
  const auto n = static_cast<Eigen::Index>(r0.size());
  const auto m = static_cast<Eigen::Index>(p.size());
  Eigen::MatrixXd jac(n, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double h = 1e-7 * (std::abs(p[j]) + 1e-7);
    Eigen::VectorXd pp = p, pm = p;
    pp[j] += h;
    pm[j] -= h;
    jac.col(j) = (f(pp) - f(pm)) / (2.0 * h);
  }
  return jac;
}

inline LmResult levenberg_marquardt(const ResidualFn& f, const Eigen::VectorXd& p0,
                                    const LmOptions& opt = {}) {
  LmResult res;
  res.params = p0;
  Eigen::VectorXd r = f(res.params);
  res.cost = r.squaredNorm();
  res.cost_trace.push_back(res.cost);

  double damping = opt.initial_damping;
  int stall = 0;

  for (res.iterations = 0; res.iterations < opt.max_iterations; ++res.iterations) {
    const Eigen::MatrixXd jac = numeric_jacobian(f, res.params, r);
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd grad = jac.transpose() * r;

    if (grad.lpNorm<Eigen::Infinity>() < opt.gtol * (1.0 + res.cost)) {
      res.converged = true;
      break;
    }

    bool accepted = false;
    for (int inner = 0; inner < 40; ++inner) {
      Eigen::MatrixXd a = jtj;
      for (Eigen::Index k = 0; k < a.rows(); ++k)
        a(k, k) += damping * (jtj(k, k) > 0.0 ? jtj(k, k) : 1.0);
      const Eigen::VectorXd step = a.ldlt().solve(-grad);
      const Eigen::VectorXd p_new = res.params + step;
      const Eigen::VectorXd r_new = f(p_new);
      const double cost_new = r_new.squaredNorm();
      if (cost_new < res.cost) {
        const double gain = res.cost - cost_new;
        res.params = p_new;
        r = r_new;
        res.cost = cost_new;
        res.cost_trace.push_back(res.cost);
        damping = std::max(damping / 3.0, 1e-14);
        accepted = true;
        stall = gain <= opt.ftol * (res.cost + 1e-300) ? stall + 1 : 0;
        break;
      }
      damping *= 4.0;
      if (damping > 1e15) break;
    }

    if (!accepted || stall >= 2) {
      res.converged = true;
      break;
    }
  }

  const Eigen::MatrixXd jac = numeric_jacobian(f, res.params, r);
  const Eigen::MatrixXd jtj = jac.transpose() * jac;
  res.covariance = jtj.ldlt().solve(
      Eigen::MatrixXd::Identity(jtj.rows(), jtj.cols()));
  return res;
}

}  // namespace shuttlesim::fit
