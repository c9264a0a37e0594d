#pragma once

#include <array>
#include <vector>

#include <Eigen/Dense>

#include "nof1/errors.hpp"
#include "nof1/linalg.hpp"
#include "nof1/model.hpp"

namespace nof1 {

/// Gaussian approximation to p(theta, b | data). The mean stacks (theta, b_1, ..., b_N).
/// The two-stage fit leaves `cross_cov` exactly zero; the conditional-likelihood fit fills it.
struct PosteriorApprox {
  Eigen::VectorXd mean;
  Eigen::MatrixXd population_cov;      // 5 x 5
  Eigen::MatrixXd random_effects_cov;  // 2N x 2N
  Eigen::MatrixXd cross_cov;           // 5 x 2N

  int n_patients() const { return static_cast<int>(random_effects_cov.rows() / 2); }
  int dim() const { return static_cast<int>(mean.size()); }

  PopulationParams theta() const { return PopulationParams::from_vector(mean.head(kNumPopulationParams)); }

  Eigen::Vector2d effects(int patient) const {
    check_patient(patient);
    return mean.segment<2>(kNumPopulationParams + 2 * (patient - 1));
  }

  /// Position of coordinate (b0_i or b1_i) in the stacked vector.
  static int effect_index(int patient, int component) { return kNumPopulationParams + 2 * (patient - 1) + component; }

  Eigen::MatrixXd covariance() const {
    const int n = dim();
    Eigen::MatrixXd out(n, n);
    out.topLeftCorner(kNumPopulationParams, kNumPopulationParams) = population_cov;
    out.bottomRightCorner(n - kNumPopulationParams, n - kNumPopulationParams) = random_effects_cov;
    out.topRightCorner(kNumPopulationParams, n - kNumPopulationParams) = cross_cov;
    out.bottomLeftCorner(n - kNumPopulationParams, kNumPopulationParams) = cross_cov.transpose();
    return out;
  }

  /// Indices of (theta, b0_i, b1_i) in the stacked vector.
  std::array<int, kNumPopulationParams + 2> patient_indices(int patient) const {
    check_patient(patient);
    return {0, 1, 2, 3, 4, effect_index(patient, 0), effect_index(patient, 1)};
  }

  Eigen::VectorXd patient_marginal_mean(int patient) const {
    const auto idx = patient_indices(patient);
    Eigen::VectorXd out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = mean[idx[i]];
    return out;
  }

  Eigen::MatrixXd patient_marginal_cov(int patient) const {
    const auto idx = patient_indices(patient);
    const Eigen::MatrixXd full = covariance();
    Eigen::MatrixXd out(idx.size(), idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < idx.size(); ++j) out(i, j) = full(idx[i], idx[j]);
    return out;
  }

  /// Both diagonal blocks symmetric and PD; shapes consistent.
  bool is_valid() const {
    const int q = static_cast<int>(random_effects_cov.rows());
    if (mean.size() != kNumPopulationParams + q) return false;
    if (population_cov.rows() != kNumPopulationParams || population_cov.cols() != kNumPopulationParams) return false;
    if (random_effects_cov.cols() != q || cross_cov.rows() != kNumPopulationParams || cross_cov.cols() != q)
      return false;
    if (!mean.allFinite()) return false;
    if (population_cov != population_cov.transpose()) return false;
    if (random_effects_cov != random_effects_cov.transpose()) return false;
    return is_positive_definite(population_cov) && is_positive_definite(random_effects_cov) &&
           is_positive_definite(covariance());
  }

 private:
  void check_patient(int patient) const {
    if (patient < 1 || patient > n_patients()) throw ContractError("unknown patient id " + std::to_string(patient));
  }
};

}  // namespace nof1
