#pragma once

#include <cmath>
#include <exception>
#include <limits>

#include <Eigen/Dense>

namespace nof1 {

/// Central-difference gradient with per-coordinate step rel_step * (1 + |x_i|).
template <class F>
Eigen::VectorXd central_gradient(F&& f, const Eigen::VectorXd& x, double rel_step) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = rel_step * (1.0 + std::abs(x[i]));
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Central-difference Hessian, symmetric by construction.
template <class F>
Eigen::MatrixXd central_hessian(F&& f, const Eigen::VectorXd& x, double rel_step) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd h(n);
  for (Eigen::Index i = 0; i < n; ++i) h[i] = rel_step * (1.0 + std::abs(x[i]));
  const double f0 = f(x);
  Eigen::MatrixXd out(n, n);
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < n; ++i) {
    y[i] = x[i] + h[i];
    const double fp = f(y);
    y[i] = x[i] - h[i];
    const double fm = f(y);
    y[i] = x[i];
    out(i, i) = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      y[i] = x[i] + h[i];
      y[j] = x[j] + h[j];
      const double fpp = f(y);
      y[j] = x[j] - h[j];
      const double fpm = f(y);
      y[i] = x[i] - h[i];
      const double fmm = f(y);
      y[j] = x[j] + h[j];
      const double fmp = f(y);
      y[i] = x[i];
      y[j] = x[j];
      out(i, j) = out(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
    }
  }
  return out;
}

struct BfgsOptions {
  double gradient_tolerance = 1e-6;  // on the max-norm of the gradient
  double stall_tolerance = 1e-3;     // accept a stalled line search below this gradient max-norm
  int max_iterations = 200;
  double fd_step = 1e-5;
};

struct BfgsResult {
  Eigen::VectorXd x;
  double value = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd gradient;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  bool stalled = false;  // line search could not improve; converged reports whether that was near a stationary point
};

/// Maximizes f with BFGS on finite-difference gradients. `inverse_curvature` is the starting
/// approximation of (-d^2 f)^{-1}; a good one (e.g. the previous posterior covariance) makes
/// warm-started refits converge in a few iterations. Evaluations that throw are treated as -inf.
template <class F>
BfgsResult maximize_bfgs(F&& f, Eigen::VectorXd x0, Eigen::MatrixXd inverse_curvature, const BfgsOptions& opt = {}) {
  const Eigen::Index n = x0.size();
  BfgsResult res;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++res.evaluations;
    try {
      const double v = f(x);
      return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
    } catch (const std::exception&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  auto grad = [&](const Eigen::VectorXd& x) {
    res.evaluations += static_cast<int>(2 * n);
    return central_gradient(f, x, opt.fd_step);
  };

  const Eigen::MatrixXd initial_h = inverse_curvature;
  Eigen::MatrixXd hinv = std::move(inverse_curvature);
  Eigen::VectorXd x = std::move(x0);
  double fx = eval(x);
  if (!std::isfinite(fx)) {
    res.x = x;
    return res;
  }
  Eigen::VectorXd g = grad(x);

  int flat = 0;  // consecutive steps with negligible improvement
  for (int it = 0; it < opt.max_iterations; ++it) {
    res.iterations = it;
    if (g.cwiseAbs().maxCoeff() <= opt.gradient_tolerance) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd dir = hinv * g;
    if (!(dir.dot(g) > 0.0) || !dir.allFinite()) {
      hinv = initial_h;
      dir = hinv * g;
    }
    const double slope = dir.dot(g);
    double t = 1.0;
    Eigen::VectorXd xn;
    double fn = -std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      xn = x + t * dir;
      fn = eval(xn);
      if (std::isfinite(fn) && fn >= fx + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      res.stalled = true;
      res.converged = g.cwiseAbs().maxCoeff() <= opt.stall_tolerance;
      break;
    }
    const Eigen::VectorXd gn = grad(xn);
    const Eigen::VectorXd s = xn - x;
    const Eigen::VectorXd yk = g - gn;  // curvature of -f
    const double sy = s.dot(yk);
    if (sy > 1e-12 * s.norm() * yk.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
      hinv = (id - rho * s * yk.transpose()) * hinv * (id - rho * yk * s.transpose()) + rho * s * s.transpose();
    }
    flat = fn - fx <= 1e-12 * (1.0 + std::abs(fx)) ? flat + 1 : 0;
    x = std::move(xn);
    fx = fn;
    g = gn;
    res.iterations = it + 1;
    // Progress has hit the finite-difference noise floor.
    if (flat >= 5 && g.cwiseAbs().maxCoeff() <= opt.stall_tolerance) {
      res.stalled = true;
      res.converged = true;
      break;
    }
  }
  if (!res.converged && !res.stalled) {
    const double gmax = g.cwiseAbs().maxCoeff();
    res.converged = gmax <= opt.gradient_tolerance;
    // Iteration cap reached close to a stationary point: same acceptance as a stalled line search.
    if (!res.converged && gmax <= opt.stall_tolerance) res.stalled = res.converged = true;
  }
  res.x = std::move(x);
  res.value = fx;
  res.gradient = std::move(g);
  return res;
}

}  // namespace nof1
