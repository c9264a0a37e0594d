#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nof1/kld.hpp"
#include "nof1/random.hpp"
#include "nof1/trial.hpp"
#include "oracle_values.hpp"
#include "test_util.hpp"

using namespace nof1;

namespace {

double log_mvn(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, const Eigen::LLT<Eigen::MatrixXd>& llt) {
  const Eigen::VectorXd z = llt.matrixL().solve(x - mu);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) logdet += 2.0 * std::log(llt.matrixLLT()(i, i));
  return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + logdet + z.squaredNorm());
}

struct McKl {
  double mean, se;
};

// KL(N1 || N0) by sampling from N1.
McKl monte_carlo_kl(const Eigen::VectorXd& mu0, const Eigen::MatrixXd& s0, const Eigen::VectorXd& mu1,
                    const Eigen::MatrixXd& s1, int n, std::uint64_t seed) {
  const Eigen::LLT<Eigen::MatrixXd> l0(s0), l1(s1);
  const MvnSampler sampler(mu1, s1);
  Rng rng(seed);
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd x = sampler.draw(rng);
    const double v = log_mvn(x, mu1, l1) - log_mvn(x, mu0, l0);
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n;
  return {mean, std::sqrt((sum2 / n - mean * mean) / n)};
}

Eigen::VectorXd random_vector(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = z(rng);
  return v;
}

}  // namespace

TEST(Kld, IdenticalIsZero) {
  std::mt19937_64 rng(1);
  for (int n = 1; n <= 6; ++n) {
    const Eigen::MatrixXd s = testutil::random_pd(n, rng);
    const Eigen::VectorXd mu = random_vector(n, rng);
    EXPECT_NEAR(kld_gaussian(mu, s, mu, s), 0.0, 1e-10);
  }
}

TEST(Kld, OneDimensionalFixture) {
  const Eigen::VectorXd mu0 = Eigen::VectorXd::Zero(1), mu1 = Eigen::VectorXd::Constant(1, 1.0);
  const double v = kld_gaussian(mu0, Eigen::MatrixXd::Identity(1, 1), mu1, Eigen::MatrixXd::Constant(1, 1, 0.5));
  EXPECT_NEAR(v, 0.596574, 1e-6);
  EXPECT_NEAR(v, oracle::kKl1dIntegral, 1e-10);
}

TEST(Kld, FourDimensionalPairMatchesMonteCarlo) {
  std::mt19937_64 rng(404);
  const Eigen::MatrixXd s0 = testutil::random_pd(4, rng), s1 = testutil::random_pd(4, rng);
  const Eigen::VectorXd mu0 = random_vector(4, rng), mu1 = random_vector(4, rng);
  const McKl mc = monte_carlo_kl(mu0, s0, mu1, s1, 1000000, 9);
  EXPECT_NEAR(kld_gaussian(mu0, s0, mu1, s1), mc.mean, 3 * mc.se);
}

TEST(Kld, NonNegativeAndPermutationInvariant) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 100; ++rep) {
    const int n = 1 + rep % 6;
    const Eigen::MatrixXd s0 = testutil::random_pd(n, rng), s1 = testutil::random_pd(n, rng);
    const Eigen::VectorXd mu0 = random_vector(n, rng), mu1 = random_vector(n, rng);
    const double v = kld_gaussian(mu0, s0, mu1, s1);
    EXPECT_GE(v, 0.0);
    Eigen::PermutationMatrix<Eigen::Dynamic> p(n);
    p.setIdentity();
    std::shuffle(p.indices().data(), p.indices().data() + n, rng);
    const Eigen::MatrixXd ps0 = p * s0 * p.transpose(), ps1 = p * s1 * p.transpose();
    EXPECT_NEAR(kld_gaussian(p * mu0, ps0, p * mu1, ps1), v, 1e-10 * std::max(1.0, v));
  }
}

TEST(Kld, Errors) {
  const Eigen::MatrixXd i2 = Eigen::MatrixXd::Identity(2, 2);
  const Eigen::VectorXd z2 = Eigen::VectorXd::Zero(2), z3 = Eigen::VectorXd::Zero(3);
  EXPECT_THROW(kld_gaussian(z2, i2, z3, Eigen::MatrixXd::Identity(3, 3)), ContractError);
  Eigen::MatrixXd bad(2, 2);
  bad << 1, 2, 2, 1;
  EXPECT_THROW(kld_gaussian(z2, bad, z2, i2), ContractError);
}

TEST(Kld, PosteriorApproxUsesFullJointCovariance) {
  const Dataset data = Dataset::from(Family::normal, 3, oracle::kNormal3);
  const PosteriorApprox prior = fit_posterior(Dataset(Family::normal, 3), PriorSpec::vague()).posterior;
  const PosteriorApprox post = fit_posterior(data, PriorSpec::vague()).posterior;
  EXPECT_NEAR(kld_mvn(prior, post), kld_gaussian(prior.mean, prior.covariance(), post.mean, post.covariance()), 1e-12);
  EXPECT_THROW(kld_mvn(prior, fit_posterior(Dataset(Family::normal, 2), PriorSpec::vague()).posterior), ContractError);
}

TEST(MetricLogDet, IdentityAndBlocks) {
  PosteriorApprox p;
  p.mean = Eigen::VectorXd::Zero(7);
  p.population_cov = Eigen::MatrixXd::Identity(5, 5);
  p.random_effects_cov = Eigen::MatrixXd::Identity(2, 2);
  p.cross_cov = Eigen::MatrixXd::Zero(5, 2);
  EXPECT_NEAR(metric_log_det(p), 0.0, 1e-14);
  p.population_cov(0, 0) = 2.0;
  p.random_effects_cov(1, 1) = 0.5;
  EXPECT_NEAR(metric_log_det(p), 0.0, 1e-14);
  EXPECT_NEAR(metric_log_det_population(p), std::log(2.0), 1e-14);
}

TEST(MetricLogDet, MatchesDenseDeterminant) {
  const Eigen::MatrixXd m = testutil::matrix(oracle::kPd4, 4, 4);
  EXPECT_NEAR(log_det_pd(m), oracle::kLogDetPd4, 1e-8);
  EXPECT_NEAR(log_det_pd(m), std::log(m.determinant()), 1e-8);
}

TEST(MetricLogDet, BlockDiagonalIsSumOfBlocks) {
  const Dataset data = Dataset::from(Family::normal, 3, oracle::kNormal3);
  const PosteriorApprox post = fit_posterior(data, PriorSpec::vague()).posterior;
  EXPECT_NEAR(metric_log_det(post), log_det_pd(post.population_cov) + log_det_pd(post.random_effects_cov), 1e-10);
}
