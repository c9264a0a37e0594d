#pragma once

#include <cmath>

#include <Eigen/Dense>

#include "nof1/errors.hpp"
#include "nof1/posterior.hpp"

namespace nof1 {

/// KL(N(mu1, s1) || N(mu0, s0)): the divergence of the updated distribution from the reference.
///   1/2 [tr(s0^{-1} s1) + (mu1 - mu0)' s0^{-1} (mu1 - mu0) - k + log(det s0 / det s1)]
/// Evaluated through Cholesky factors; no explicit inverse is formed.
inline double kld_gaussian(const Eigen::VectorXd& mu0, const Eigen::MatrixXd& s0, const Eigen::VectorXd& mu1,
                           const Eigen::MatrixXd& s1) {
  const Eigen::Index k = mu0.size();
  if (mu1.size() != k || s0.rows() != k || s0.cols() != k || s1.rows() != k || s1.cols() != k)
    throw ContractError("kld: dimension mismatch");
  const Eigen::LLT<Eigen::MatrixXd> l0(s0);
  const Eigen::LLT<Eigen::MatrixXd> l1(s1);
  if (l0.info() != Eigen::Success || l1.info() != Eigen::Success)
    throw ContractError("kld: covariance is not positive definite");
  const auto tri0 = l0.matrixL();
  const Eigen::MatrixXd m = tri0.solve(Eigen::MatrixXd(l1.matrixL()));
  const Eigen::VectorXd v = tri0.solve(mu1 - mu0);
  double logdet0 = 0.0, logdet1 = 0.0;
  const Eigen::MatrixXd& f0 = l0.matrixLLT();
  const Eigen::MatrixXd& f1 = l1.matrixLLT();
  for (Eigen::Index i = 0; i < k; ++i) {
    logdet0 += 2.0 * std::log(f0(i, i));
    logdet1 += 2.0 * std::log(f1(i, i));
  }
  return 0.5 * (m.squaredNorm() + v.squaredNorm() - static_cast<double>(k) + logdet0 - logdet1);
}

/// KL divergence of `updated` from `reference` over the full joint (theta, b).
inline double kld_mvn(const PosteriorApprox& reference, const PosteriorApprox& updated) {
  if (reference.dim() != updated.dim()) throw ContractError("kld: posterior dimensions differ");
  return kld_gaussian(reference.mean, reference.covariance(), updated.mean, updated.covariance());
}

}  // namespace nof1
