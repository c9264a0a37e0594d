#pragma once

// Two-stage Laplace approximation for the N-of-1 mixed model.
//
// Inner stage: for fixed theta, b*_theta = argmax_b h(b, theta) with
//   h = log p(y | theta, b) + log p(b | omega),
// and the marginal log-likelihood is approximated by
//   l(theta) = h(b*_theta, theta) + (q/2) log(2 pi) - 1/2 log det(-H(b*_theta)).
// Outer stage: theta* = argmax l(theta) + log p(theta), curvature A(theta*) by finite
// differences, giving MVN((theta*, b*), blockdiag(-A^{-1}, -H^{-1})).
//
// Both supported families are Gaussian in b on the model scale, so the inner problem is a
// concave quadratic per patient and the Laplace step is exact.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nof1/errors.hpp"
#include "nof1/linalg.hpp"
#include "nof1/model.hpp"
#include "nof1/optimize.hpp"
#include "nof1/posterior.hpp"

namespace nof1 {

/// Per-patient sufficient statistics on the model scale, centred on the patient's first
/// response to keep the residual sums well conditioned.
struct PatientStats {
  double n = 0.0;          // observations
  double n1 = 0.0;         // observations on active treatment
  double center = 0.0;     // model-scale value subtracted from every response
  double sum_z = 0.0;      // sum (z - center)
  double sum_dz = 0.0;     // sum d (z - center)
  double sum_zz = 0.0;     // sum (z - center)^2
  double log_jacobian = 0.0;

  /// sum (z - m0 - m1 d)^2 and its two linear moments for cell means (m0, m1).
  struct Residuals {
    double ss, r0, r1;
  };
  Residuals residuals(double m0, double m1) const {
    const double a = m0 - center;
    const double r0 = sum_z - n * a - n1 * m1;
    const double r1 = sum_dz - n1 * a - n1 * m1;
    const double ss = sum_zz - 2.0 * a * sum_z - 2.0 * m1 * sum_dz + n * a * a + 2.0 * a * m1 * n1 + n1 * m1 * m1;
    return {ss, r0, r1};
  }
};

/// What the inference routines see of a trial: a family, an enrolment size, and per-patient sums.
class Dataset {
 public:
  Dataset(Family family, int n_patients) : family_(family), stats_(static_cast<std::size_t>(n_patients)) {
    if (n_patients < 0) throw ContractError("Dataset: negative patient count");
  }

  static Dataset from(Family family, int n_patients, std::span<const Observation> obs) {
    Dataset d(family, n_patients);
    for (const Observation& o : obs) d.add(o);
    return d;
  }

  void add(const Observation& o) {
    if (o.patient < 1 || o.patient > n_patients())
      throw ContractError("unknown patient id " + std::to_string(o.patient));
    if (o.treatment != 0 && o.treatment != 1) throw ContractError("treatment must be 0 or 1");
    const double z = model_scale(family_, o.response);
    PatientStats& s = stats_[static_cast<std::size_t>(o.patient - 1)];
    if (s.n == 0.0) s.center = z;
    const double c = z - s.center;
    s.n += 1.0;
    s.n1 += o.treatment;
    s.sum_z += c;
    s.sum_dz += o.treatment * c;
    s.sum_zz += c * c;
    s.log_jacobian += log_jacobian(family_, o.response);
    ++size_;
  }

  Dataset with(const Observation& o) const {
    Dataset d = *this;
    d.add(o);
    return d;
  }

  Family family() const { return family_; }
  int n_patients() const { return static_cast<int>(stats_.size()); }
  std::size_t size() const { return size_; }
  const PatientStats& patient(int id) const { return stats_.at(static_cast<std::size_t>(id - 1)); }

 private:
  Family family_;
  std::vector<PatientStats> stats_;
  std::size_t size_ = 0;
};

namespace detail {

/// Sum that does not depend on the order of the terms: sorted, then compensated. Keeps fits
/// bitwise invariant under relabelling of patients.
inline double order_free_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double sum = 0.0, comp = 0.0;
  for (double t : terms) {
    const double next = sum + t;
    comp += std::abs(sum) >= std::abs(t) ? (sum - next) + t : (t - next) + sum;
    sum = next;
  }
  return sum + comp;
}

struct ThetaTerms {
  double tau;       // 1 / sigma^2
  double log_sigma;
  double inv_w0, inv_w1;
  double u0, u1;
};

inline ThetaTerms theta_terms(const PopulationParams& t) {
  return {std::exp(-2.0 * t.log_sigma), t.log_sigma, std::exp(-2.0 * t.log_sqrt_omega0),
          std::exp(-2.0 * t.log_sqrt_omega1), t.log_sqrt_omega0, t.log_sqrt_omega1};
}

/// h_i(b_i, theta) for one patient.
inline double patient_joint(const PatientStats& s, const PopulationParams& t, const ThetaTerms& k,
                            const Eigen::Vector2d& b) {
  const auto r = s.residuals(t.beta0 + b[0], t.beta1 + b[1]);
  const double loglik = -0.5 * s.n * kLog2Pi - s.n * k.log_sigma - 0.5 * k.tau * r.ss + s.log_jacobian;
  const double logprior =
      -kLog2Pi - k.u0 - k.u1 - 0.5 * (b[0] * b[0] * k.inv_w0 + b[1] * b[1] * k.inv_w1);
  return loglik + logprior;
}

inline Eigen::Vector2d patient_gradient(const PatientStats& s, const PopulationParams& t, const ThetaTerms& k,
                                        const Eigen::Vector2d& b) {
  const auto r = s.residuals(t.beta0 + b[0], t.beta1 + b[1]);
  return {k.tau * r.r0 - b[0] * k.inv_w0, k.tau * r.r1 - b[1] * k.inv_w1};
}

/// -d^2 h_i / db db' (the patient's posterior precision given theta).
inline Eigen::Matrix2d patient_precision(const PatientStats& s, const ThetaTerms& k) {
  Eigen::Matrix2d p;
  p << k.tau * s.n + k.inv_w0, k.tau * s.n1, k.tau * s.n1, k.tau * s.n1 + k.inv_w1;
  return p;
}

struct PatientMode {
  Eigen::Vector2d b;
  Eigen::Matrix2d precision;
  double h;
  int iterations;
  bool converged;
};

/// Damped Newton from b = 0. For the conditionally Gaussian families one step is exact and the
/// second pass only confirms the gradient vanished.
inline PatientMode patient_mode(const PatientStats& s, const PopulationParams& t, const ThetaTerms& k,
                                double tolerance, int max_iterations) {
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
  const Eigen::Matrix2d prec = patient_precision(s, k);
  const double det = prec(0, 0) * prec(1, 1) - prec(0, 1) * prec(1, 0);
  if (!(prec(0, 0) > 0.0) || !(det > 0.0) || !std::isfinite(det))
    throw InferenceError("inner mode: random-effects curvature is not negative definite");
  Eigen::Matrix2d cov;
  cov << prec(1, 1) / det, -prec(0, 1) / det, -prec(1, 0) / det, prec(0, 0) / det;

  Eigen::Vector2d g = patient_gradient(s, t, k, b);
  const double scale = 1.0 + g.cwiseAbs().maxCoeff();
  double hb = patient_joint(s, t, k, b);
  int it = 0;
  bool converged = g.cwiseAbs().maxCoeff() <= tolerance * scale;
  while (!converged && it < max_iterations) {
    const Eigen::Vector2d step = cov * g;
    double lambda = 1.0;
    Eigen::Vector2d candidate = b + step;
    double hc = patient_joint(s, t, k, candidate);
    while (hc < hb && lambda > 1e-10) {
      lambda *= 0.5;
      candidate = b + lambda * step;
      hc = patient_joint(s, t, k, candidate);
    }
    b = candidate;
    hb = hc;
    g = patient_gradient(s, t, k, b);
    ++it;
    converged = g.cwiseAbs().maxCoeff() <= tolerance * scale;
  }
  return {b, prec, hb, it, converged};
}

}  // namespace detail

struct InnerOptions {
  double tolerance = 1e-8;  // gradient max-norm, relative to 1 + |gradient at b = 0|
  int max_iterations = 100;
};

/// Mode of h over the random effects for fixed theta, and the Hessian there.
struct InnerSolve {
  RandomEffects b_star;
  std::vector<Eigen::Matrix2d> hessian_blocks;  // d^2 h / db_i db_i', negative definite
  bool converged = true;
  int iterations = 0;

  Eigen::MatrixXd hessian() const {
    const Eigen::Index q = 2 * static_cast<Eigen::Index>(hessian_blocks.size());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(q, q);
    for (std::size_t i = 0; i < hessian_blocks.size(); ++i)
      out.block<2, 2>(2 * static_cast<Eigen::Index>(i), 2 * static_cast<Eigen::Index>(i)) = hessian_blocks[i];
    return out;
  }
};

/// h(b, theta) from the dataset's sufficient statistics.
inline double joint_log_density(const PopulationParams& theta, const RandomEffects& b, const Dataset& data) {
  if (b.n_patients() != data.n_patients()) throw ContractError("joint_log_density: random-effects dimension mismatch");
  const auto k = detail::theta_terms(theta);
  double total = 0.0;
  for (int i = 1; i <= data.n_patients(); ++i) total += detail::patient_joint(data.patient(i), theta, k, b.patient(i));
  return total;
}

/// h(b, theta) straight from the observation list.
inline double joint_log_density(const PopulationParams& theta, const RandomEffects& b,
                                std::span<const Observation> obs, Family family) {
  return conditional_log_likelihood(obs, theta, b, family) + random_effects_log_prior(b, theta);
}

inline InnerSolve inner_mode(const PopulationParams& theta, const Dataset& data, const InnerOptions& opt = {}) {
  const auto k = detail::theta_terms(theta);
  InnerSolve out;
  out.b_star = RandomEffects(data.n_patients());
  out.hessian_blocks.reserve(static_cast<std::size_t>(data.n_patients()));
  for (int i = 1; i <= data.n_patients(); ++i) {
    const auto m = detail::patient_mode(data.patient(i), theta, k, opt.tolerance, opt.max_iterations);
    out.b_star.set_patient(i, m.b);
    out.hessian_blocks.push_back(-m.precision);
    out.iterations = std::max(out.iterations, m.iterations);
    out.converged = out.converged && m.converged;
  }
  if (!out.converged) throw InferenceError("inner mode did not converge");
  return out;
}

/// Laplace-approximate marginal log-likelihood, including the (q/2) log(2 pi) constant.
inline double laplace_marginal_loglik(const PopulationParams& theta, const Dataset& data,
                                      const InnerOptions& opt = {}) {
  const auto k = detail::theta_terms(theta);
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(data.n_patients()));
  for (int i = 1; i <= data.n_patients(); ++i) {
    const PatientStats& s = data.patient(i);
    const auto m = detail::patient_mode(s, theta, k, opt.tolerance, opt.max_iterations);
    if (!m.converged) throw InferenceError("inner mode did not converge");
    const double logdet = std::log(m.precision(0, 0) * m.precision(1, 1) - m.precision(0, 1) * m.precision(1, 0));
    terms.push_back(m.h + kLog2Pi - 0.5 * logdet);
  }
  return detail::order_free_sum(terms);
}

/// l(theta) + log p(theta), the outer objective.
inline double log_posterior_population(const PopulationParams& theta, const Dataset& data, const PriorSpec& prior) {
  return laplace_marginal_loglik(theta, data) + population_log_prior(theta, prior);
}

/// Gradient of h(b, theta) with respect to the stacked (theta, b), analytic.
inline Eigen::VectorXd joint_gradient(const PopulationParams& t, const RandomEffects& b, const Dataset& data) {
  const int n = data.n_patients();
  const auto k = detail::theta_terms(t);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(kNumPopulationParams + 2 * n);
  for (int i = 1; i <= n; ++i) {
    const PatientStats& s = data.patient(i);
    const Eigen::Vector2d bi = b.patient(i);
    const auto r = s.residuals(t.beta0 + bi[0], t.beta1 + bi[1]);
    const int i0 = PosteriorApprox::effect_index(i, 0);
    const double dm0 = k.tau * r.r0;
    const double dm1 = k.tau * r.r1;
    g[kBeta0] += dm0;
    g[kBeta1] += dm1;
    g[kLogSigma] += -s.n + k.tau * r.ss;
    g[kLogSqrtOmega0] += -1.0 + bi[0] * bi[0] * k.inv_w0;
    g[kLogSqrtOmega1] += -1.0 + bi[1] * bi[1] * k.inv_w1;
    g[i0] = dm0 - bi[0] * k.inv_w0;
    g[i0 + 1] = dm1 - bi[1] * k.inv_w1;
  }
  return g;
}

/// Hessian of h(b, theta) with respect to the stacked (theta, b), analytic.
inline Eigen::MatrixXd joint_hessian(const PopulationParams& t, const RandomEffects& b, const Dataset& data) {
  const int n = data.n_patients();
  const int dim = kNumPopulationParams + 2 * n;
  const auto k = detail::theta_terms(t);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
  for (int i = 1; i <= n; ++i) {
    const PatientStats& s = data.patient(i);
    const Eigen::Vector2d bi = b.patient(i);
    const auto r = s.residuals(t.beta0 + bi[0], t.beta1 + bi[1]);
    const int i0 = PosteriorApprox::effect_index(i, 0);
    const int i1 = i0 + 1;
    // Cell-mean block: each of (beta0, b0_i) maps to m0, each of (beta1, b1_i) to m1.
    const double a00 = -k.tau * s.n;
    const double a01 = -k.tau * s.n1;
    const double a11 = -k.tau * s.n1;
    const std::array<int, 2> m0_idx = {kBeta0, i0};
    const std::array<int, 2> m1_idx = {kBeta1, i1};
    for (int p : m0_idx)
      for (int q : m0_idx) h(p, q) += a00;
    for (int p : m1_idx)
      for (int q : m1_idx) h(p, q) += a11;
    for (int p : m0_idx)
      for (int q : m1_idx) {
        h(p, q) += a01;
        h(q, p) += a01;
      }
    // log sigma couplings.
    const double s0 = -2.0 * k.tau * r.r0;
    const double s1 = -2.0 * k.tau * r.r1;
    for (int p : m0_idx) {
      h(p, kLogSigma) += s0;
      h(kLogSigma, p) += s0;
    }
    for (int p : m1_idx) {
      h(p, kLogSigma) += s1;
      h(kLogSigma, p) += s1;
    }
    h(kLogSigma, kLogSigma) += -2.0 * k.tau * r.ss;
    // Random-effects prior.
    h(i0, i0) += -k.inv_w0;
    h(i1, i1) += -k.inv_w1;
    const double c0 = 2.0 * bi[0] * k.inv_w0;
    const double c1 = 2.0 * bi[1] * k.inv_w1;
    h(i0, kLogSqrtOmega0) += c0;
    h(kLogSqrtOmega0, i0) += c0;
    h(i1, kLogSqrtOmega1) += c1;
    h(kLogSqrtOmega1, i1) += c1;
    h(kLogSqrtOmega0, kLogSqrtOmega0) += -2.0 * bi[0] * bi[0] * k.inv_w0;
    h(kLogSqrtOmega1, kLogSqrtOmega1) += -2.0 * bi[1] * bi[1] * k.inv_w1;
  }
  return h;
}

struct FitOptions {
  std::optional<ParamVector> warm_start;
  /// Starting approximation of the population covariance for BFGS; computed by finite
  /// differences at the start point when absent.
  std::optional<Eigen::MatrixXd> inverse_curvature;
  BfgsOptions bfgs{};
  double hessian_step = 3e-4;
};

struct OuterSolve {
  PopulationParams theta;
  double objective = 0.0;
  double gradient_norm = 0.0;  // max-norm
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

namespace detail {

/// Hessian of log p(theta), exact: the prior is an independent Normal on each coordinate.
inline Eigen::MatrixXd prior_hessian(const PriorSpec& prior) {
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(kNumPopulationParams, kNumPopulationParams);
  for (int i = 0; i < kNumPopulationParams; ++i) h(i, i) = -1.0 / (prior.coords[i].sd * prior.coords[i].sd);
  return h;
}

/// Curvature of loglik(theta) + log p(theta): central differences of the likelihood part only, plus
/// the prior's exact Hessian. Differencing the prior as well would add rounding error of order
/// eps |f| / step^2, which swamps the 1e-4 curvature of a sd-100 coefficient.
template <class F>
Eigen::MatrixXd objective_hessian(F&& loglik, const Eigen::VectorXd& x, const PriorSpec& prior, double rel_step) {
  return symmetrized(central_hessian(loglik, x, rel_step)) + prior_hessian(prior);
}

/// Maximizes loglik(theta) + log p(theta) with BFGS, choosing a starting metric.
template <class F>
OuterSolve maximize_population(F&& loglik, const PriorSpec& prior, const FitOptions& opt) {
  auto objective = [&](const Eigen::VectorXd& x) {
    return loglik(x) + population_log_prior(PopulationParams::from_vector(x), prior);
  };
  const Eigen::VectorXd x0 = opt.warm_start ? Eigen::VectorXd(*opt.warm_start) : Eigen::VectorXd(prior.mean());
  Eigen::MatrixXd h0;
  if (opt.inverse_curvature && is_positive_definite(*opt.inverse_curvature)) {
    h0 = *opt.inverse_curvature;
  } else {
    h0 = prior.covariance();
    try {
      const Eigen::MatrixXd curv = -objective_hessian(loglik, x0, prior, opt.hessian_step);
      if (is_positive_definite(curv)) h0 = curv.llt().solve(Eigen::MatrixXd::Identity(kNumPopulationParams, kNumPopulationParams));
    } catch (const std::exception&) {
    }
  }
  const BfgsResult r = maximize_bfgs(objective, x0, h0, opt.bfgs);
  OuterSolve out;
  out.theta = PopulationParams::from_vector(r.x);
  out.objective = r.value;
  out.gradient_norm = r.gradient.size() ? r.gradient.cwiseAbs().maxCoeff() : 0.0;
  out.iterations = r.iterations;
  out.evaluations = r.evaluations;
  out.converged = r.converged;
  return out;
}

}  // namespace detail

/// theta* = argmax l(theta) + log p(theta); each evaluation re-solves the inner mode.
inline OuterSolve posterior_mode(const Dataset& data, const PriorSpec& prior, const FitOptions& opt = {}) {
  auto loglik = [&](const Eigen::VectorXd& x) { return laplace_marginal_loglik(PopulationParams::from_vector(x), data); };
  return detail::maximize_population(loglik, prior, opt);
}

/// Curvature A(theta) of the outer objective: central differences of l(theta), exact prior term.
inline Eigen::MatrixXd population_hessian(const PopulationParams& theta, const Dataset& data, const PriorSpec& prior,
                                          double rel_step = 3e-4) {
  auto loglik = [&](const Eigen::VectorXd& x) { return laplace_marginal_loglik(PopulationParams::from_vector(x), data); };
  return detail::objective_hessian(loglik, Eigen::VectorXd(theta.to_vector()), prior, rel_step);
}

/// MVN((theta*, b*), blockdiag(-A^{-1}, -H^{-1})).
inline PosteriorApprox assemble_posterior(const PopulationParams& theta_star, const Dataset& data,
                                          const PriorSpec& prior, double rel_step = 3e-4) {
  const Eigen::MatrixXd a = population_hessian(theta_star, data, prior, rel_step);
  const InnerSolve inner = inner_mode(theta_star, data);
  const int n = data.n_patients();
  PosteriorApprox post;
  post.mean.resize(kNumPopulationParams + 2 * n);
  post.mean.head(kNumPopulationParams) = theta_star.to_vector();
  post.mean.tail(2 * n) = inner.b_star.stacked();
  post.population_cov = inverse_pd_with_jitter(-a, "population block").inverse;
  post.random_effects_cov = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  for (int i = 0; i < n; ++i) {
    const Eigen::Matrix2d prec = -inner.hessian_blocks[static_cast<std::size_t>(i)];
    Eigen::Matrix2d cov = prec.inverse();
    cov(0, 1) = cov(1, 0) = 0.5 * (cov(0, 1) + cov(1, 0));
    post.random_effects_cov.block<2, 2>(2 * i, 2 * i) = cov;
  }
  post.cross_cov = Eigen::MatrixXd::Zero(kNumPopulationParams, 2 * n);
  if (!is_positive_definite(post.random_effects_cov))
    throw InferenceError("random-effects block is not positive definite");
  return post;
}

/// One Newton step from a converged BFGS iterate using the finite-difference curvature. The
/// gradient tolerance leaves the mode uncertain at the level cov * tol; after the step the mode and
/// hence A(theta*) no longer depend on the path the quasi-Newton search took.
inline PopulationParams polish_mode(const PopulationParams& theta, const Dataset& data, const PriorSpec& prior,
                                    double rel_step = 3e-4) {
  auto objective = [&](const Eigen::VectorXd& x) {
    return log_posterior_population(PopulationParams::from_vector(x), data, prior);
  };
  const Eigen::VectorXd x = theta.to_vector();
  const Eigen::MatrixXd neg_a = -population_hessian(theta, data, prior, rel_step);
  Eigen::LLT<Eigen::MatrixXd> llt(neg_a);
  if (llt.info() != Eigen::Success) return theta;
  const Eigen::VectorXd g = central_gradient(objective, x, BfgsOptions{}.fd_step);
  const Eigen::VectorXd next = x + llt.solve(g);
  try {
    if (objective(next) >= objective(x)) return PopulationParams::from_vector(next);
  } catch (const std::exception&) {
  }
  return theta;
}

struct FitResult {
  PosteriorApprox posterior;
  OuterSolve outer;
};

/// posterior_mode followed by assemble_posterior; throws InferenceError when the mode search fails.
inline FitResult fit_posterior(const Dataset& data, const PriorSpec& prior, const FitOptions& opt = {}) {
  FitResult r;
  r.outer = posterior_mode(data, prior, opt);
  if (!r.outer.converged)
    throw InferenceError("posterior mode search did not converge (gradient max-norm " +
                         std::to_string(r.outer.gradient_norm) + " after " + std::to_string(r.outer.iterations) +
                         " iterations)");
  r.outer.theta = polish_mode(r.outer.theta, data, prior, opt.hessian_step);
  r.posterior = assemble_posterior(r.outer.theta, data, prior, opt.hessian_step);
  return r;
}

/// Single Gaussian approximation at the joint mode of log p(y | theta, b) + log p(b | omega) + log p(theta),
/// with the full joint Hessian: random effects are not integrated out.
inline PosteriorApprox conditional_laplace_posterior(const Dataset& data, const PriorSpec& prior,
                                                     const FitOptions& opt = {}) {
  // The joint maximum over (theta, b) equals the maximum over theta of the profile h(b*_theta, theta).
  auto profile = [&](const Eigen::VectorXd& x) {
    const PopulationParams t = PopulationParams::from_vector(x);
    const auto k = detail::theta_terms(t);
    double total = 0.0;
    for (int i = 1; i <= data.n_patients(); ++i) {
      const auto m = detail::patient_mode(data.patient(i), t, k, 1e-10, 100);
      total += m.h;
    }
    return total;
  };
  const OuterSolve mode = detail::maximize_population(profile, prior, opt);
  if (!mode.converged) throw InferenceError("conditional-likelihood mode search did not converge");
  const InnerSolve inner = inner_mode(mode.theta, data);
  const int n = data.n_patients();
  Eigen::MatrixXd hess = joint_hessian(mode.theta, inner.b_star, data);
  for (int i = 0; i < kNumPopulationParams; ++i) hess(i, i) -= 1.0 / (prior.coords[i].sd * prior.coords[i].sd);
  const Eigen::MatrixXd cov = inverse_pd_with_jitter(-hess, "conditional-likelihood joint block").inverse;
  PosteriorApprox post;
  post.mean.resize(kNumPopulationParams + 2 * n);
  post.mean.head(kNumPopulationParams) = mode.theta.to_vector();
  post.mean.tail(2 * n) = inner.b_star.stacked();
  post.population_cov = cov.topLeftCorner(kNumPopulationParams, kNumPopulationParams);
  post.random_effects_cov = cov.bottomRightCorner(2 * n, 2 * n);
  post.cross_cov = cov.topRightCorner(kNumPopulationParams, 2 * n);
  if (!post.is_valid()) throw InferenceError("conditional-likelihood posterior is not positive definite");
  return post;
}

}  // namespace nof1
