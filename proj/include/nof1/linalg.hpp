#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "nof1/errors.hpp"

namespace nof1 {

inline Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

/// log det of a symmetric positive-definite matrix from its Cholesky factor.
inline double log_det_pd(const Eigen::MatrixXd& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) throw InferenceError("log_det_pd: matrix is not positive definite");
  const Eigen::MatrixXd& l = llt.matrixLLT();
  double out = 0.0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) out += std::log(l(i, i));
  return 2.0 * out;
}

inline bool is_positive_definite(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) return false;
  if (m.size() == 0) return true;
  if (!m.allFinite()) return false;
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  return llt.info() == Eigen::Success;
}

struct JitteredInverse {
  Eigen::MatrixXd inverse;
  double jitter = 0.0;  // diagonal shift that was needed (0 when none)
};

/// Inverts a symmetric matrix that should be positive definite. When the Cholesky factorization
/// fails, a diagonal shift of 1e-8 * tr/dim is added and raised tenfold up to 1e-2 * tr/dim.
inline JitteredInverse inverse_pd_with_jitter(const Eigen::MatrixXd& precision, const std::string& what) {
  const Eigen::Index n = precision.rows();
  const Eigen::MatrixXd sym = symmetrized(precision);
  if (!sym.allFinite()) throw InferenceError(what + ": non-finite curvature");
  const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(n, n);
  const double scale = std::abs(sym.trace()) / static_cast<double>(n);
  double shift = 0.0;
  for (double factor = 0.0; factor <= 1e-2 * (1.0 + 1e-9); factor = (factor == 0.0 ? 1e-8 : factor * 10.0)) {
    shift = factor * scale;
    Eigen::LLT<Eigen::MatrixXd> llt(sym + shift * identity);
    if (llt.info() == Eigen::Success) {
      Eigen::MatrixXd inv = llt.solve(identity);
      inv = symmetrized(inv);
      if (is_positive_definite(inv)) return {std::move(inv), shift};
    }
  }
  throw InferenceError(what + ": curvature is not positive definite after jitter escalation");
}

}  // namespace nof1
