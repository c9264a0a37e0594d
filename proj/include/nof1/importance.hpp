#pragma once

// Self-normalized importance sampling against the exact joint posterior kernel; serves as the
// reference posterior when validating the Laplace approximations.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "nof1/errors.hpp"
#include "nof1/laplace.hpp"
#include "nof1/posterior.hpp"
#include "nof1/random.hpp"

namespace nof1 {

struct ImportanceOptions {
  int n_draws = 100000;
  double inflation = 2.0;  // proposal covariance multiplier
  int t_dof = 0;           // > 0: multivariate-t proposal with this many degrees of freedom
  std::uint64_t seed = 1;
  bool keep_samples = false;
};

struct ImportanceResult {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
  double ess = 0.0;
  int n_draws = 0;
  bool reliable = true;  // false when ESS < 5% of the draws
  Eigen::MatrixXd samples;  // dim x n_draws when kept
  Eigen::VectorXd weights;  // normalized, when kept

  double sd(Eigen::Index i) const { return std::sqrt(variance[i]); }
};

/// Generic self-normalized IS with a Gaussian proposal N(mean, inflation * cov).
template <class LogTarget>
ImportanceResult importance_sample(LogTarget&& log_target, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                   const ImportanceOptions& opt) {
  if (opt.n_draws < 1000) throw ContractError("importance sampling needs at least 1000 draws");
  const Eigen::Index dim = mean.size();
  const MvnSampler proposal(mean, opt.inflation * cov);
  const Eigen::MatrixXd& l = proposal.cholesky();
  double log_det_l = 0.0;
  for (Eigen::Index i = 0; i < dim; ++i) log_det_l += std::log(l(i, i));
  if (opt.t_dof < 0) throw ContractError("t_dof must be non-negative");
  const double p = static_cast<double>(dim), nu = opt.t_dof;
  const double log_norm = opt.t_dof == 0 ? -0.5 * p * kLog2Pi - log_det_l
                                         : std::lgamma(0.5 * (nu + p)) - std::lgamma(0.5 * nu) -
                                               0.5 * p * std::log(nu * M_PI) - log_det_l;

  Rng rng(opt.seed);
  Eigen::MatrixXd xs(dim, opt.n_draws);
  Eigen::VectorXd logw(opt.n_draws);
  Eigen::VectorXd z(dim);
  for (int s = 0; s < opt.n_draws; ++s) {
    for (Eigen::Index i = 0; i < dim; ++i) z[i] = standard_normal(rng);
    double log_q;
    if (opt.t_dof == 0) {
      log_q = log_norm - 0.5 * z.squaredNorm();
    } else {
      double chi2 = 0.0;
      for (int k = 0; k < opt.t_dof; ++k) chi2 += std::pow(standard_normal(rng), 2);
      z /= std::sqrt(chi2 / nu);
      log_q = log_norm - 0.5 * (nu + p) * std::log1p(z.squaredNorm() / nu);
    }
    xs.col(s) = mean + l.triangularView<Eigen::Lower>() * z;
    const double log_p = log_target(xs.col(s));
    logw[s] = std::isfinite(log_p) ? log_p - log_q : -std::numeric_limits<double>::infinity();
  }
  const double max_w = logw.maxCoeff();
  if (!std::isfinite(max_w)) throw InferenceError("importance sampling: every weight is zero");
  Eigen::VectorXd w = (logw.array() - max_w).exp();
  w /= w.sum();

  ImportanceResult out;
  out.n_draws = opt.n_draws;
  out.mean = xs * w;
  const Eigen::MatrixXd centered = xs.colwise() - out.mean;
  out.variance = centered.array().square().matrix() * w;
  out.ess = 1.0 / w.squaredNorm();
  out.reliable = out.ess >= 0.05 * opt.n_draws;
  if (opt.keep_samples) {
    out.samples = std::move(xs);
    out.weights = std::move(w);
  }
  return out;
}

/// log p(y | theta, b) + log p(b | omega) + log p(theta) at a stacked (theta, b).
inline double joint_posterior_kernel(const Eigen::Ref<const Eigen::VectorXd>& x, const Dataset& data,
                                     const PriorSpec& prior) {
  const PopulationParams theta = PopulationParams::from_vector(x.head(kNumPopulationParams));
  const RandomEffects b(Eigen::VectorXd(x.tail(x.size() - kNumPopulationParams)));
  return joint_log_density(theta, b, data) + population_log_prior(theta, prior);
}

/// Reference posterior moments by IS, using the (inflated) Laplace approximation as proposal.
inline ImportanceResult reference_posterior_is(const Dataset& data, const PriorSpec& prior,
                                               const PosteriorApprox& proposal, const ImportanceOptions& opt = {}) {
  if (proposal.n_patients() != data.n_patients()) throw ContractError("proposal dimension does not match data");
  auto target = [&](const Eigen::Ref<const Eigen::VectorXd>& x) { return joint_posterior_kernel(x, data, prior); };
  return importance_sample(target, proposal.mean, proposal.covariance(), opt);
}

/// Closed-form marginal log-likelihood with b integrated out: per patient the transformed
/// responses are N(X beta, X Omega X' + sigma^2 I), X = [1, d]. Built from the raw records with a
/// dense covariance, so it shares no code with the Laplace path.
inline double exact_marginal_loglik(const PopulationParams& t, std::span<const Observation> obs, int n_patients,
                                    Family family) {
  const Eigen::Matrix2d omega =
      Eigen::Vector2d(std::exp(2 * t.log_sqrt_omega0), std::exp(2 * t.log_sqrt_omega1)).asDiagonal();
  const double sigma2 = std::exp(2 * t.log_sigma);
  double total = 0.0;
  for (int i = 1; i <= n_patients; ++i) {
    std::vector<const Observation*> rows;
    for (const auto& o : obs)
      if (o.patient == i) rows.push_back(&o);
    const auto n = static_cast<Eigen::Index>(rows.size());
    if (n == 0) continue;
    Eigen::MatrixXd x(n, 2);
    Eigen::VectorXd z(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      const Observation& o = *rows[static_cast<std::size_t>(r)];
      x(r, 0) = 1.0;
      x(r, 1) = o.treatment;
      z[r] = model_scale(family, o.response);
      total += log_jacobian(family, o.response);
    }
    const Eigen::MatrixXd v = x * omega * x.transpose() + sigma2 * Eigen::MatrixXd::Identity(n, n);
    const Eigen::LLT<Eigen::MatrixXd> llt(v);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const Eigen::VectorXd w = llt.matrixL().solve(z - x * Eigen::Vector2d(t.beta0, t.beta1));
    double logdet = 0.0;
    for (Eigen::Index r = 0; r < n; ++r) logdet += 2 * std::log(llt.matrixLLT()(r, r));
    total += -0.5 * (static_cast<double>(n) * kLog2Pi + logdet + w.squaredNorm());
  }
  return total;
}

/// Reference posterior of the population parameters by IS on the exact marginal posterior
/// p(theta | y), proposal centred on the Laplace population block. Far better conditioned than
/// sampling (theta, b) jointly, where the random effects and their scales form a funnel.
inline ImportanceResult reference_population_is(std::span<const Observation> obs, int n_patients, Family family,
                                                const PriorSpec& prior, const PosteriorApprox& proposal,
                                                ImportanceOptions opt = {}) {
  if (proposal.n_patients() != n_patients) throw ContractError("proposal dimension does not match data");
  if (opt.t_dof == 0) opt.t_dof = 4;
  auto target = [&](const Eigen::Ref<const Eigen::VectorXd>& x) {
    const PopulationParams t = PopulationParams::from_vector(x);
    return exact_marginal_loglik(t, obs, n_patients, family) + population_log_prior(t, prior);
  };
  return importance_sample(target, proposal.theta().to_vector(), proposal.population_cov, opt);
}

}  // namespace nof1
