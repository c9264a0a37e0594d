#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Dense>

#include "nof1/errors.hpp"

namespace nof1 {

using Rng = std::mt19937_64;

/// Named sub-streams of a seed tree.
enum class Stream : std::uint64_t {
  truths = 1,
  data = 2,
  policy = 3,
  metric = 4,
  randomized = 5,
  utility = 6,
  summary = 7,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed at `path` below `parent`. Distinct paths give statistically independent streams,
/// so work can be split across threads without changing results.
inline std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t s = splitmix64(parent);
  for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline std::uint64_t derive_seed(std::uint64_t parent, Stream stream,
                                 std::initializer_list<std::uint64_t> path = {}) noexcept {
  std::uint64_t s = derive_seed(parent, {static_cast<std::uint64_t>(stream)});
  return path.size() == 0 ? s : derive_seed(s, path);
}

inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

inline double uniform01(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

/// Draws from N(mean, cov) through the lower Cholesky factor.
class MvnSampler {
 public:
  MvnSampler(Eigen::VectorXd mean, const Eigen::MatrixXd& cov) : mean_(std::move(mean)) {
    if (cov.rows() != mean_.size() || cov.cols() != mean_.size())
      throw ContractError("MvnSampler: covariance shape does not match mean");
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw InferenceError("MvnSampler: covariance is not positive definite");
    chol_ = llt.matrixL();
  }

  Eigen::Index dim() const { return mean_.size(); }

  Eigen::VectorXd draw(Rng& rng) const {
    Eigen::VectorXd z(mean_.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = standard_normal(rng);
    return mean_ + chol_.triangularView<Eigen::Lower>() * z;
  }

  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& cholesky() const { return chol_; }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd chol_;
};

}  // namespace nof1
