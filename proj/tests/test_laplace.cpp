#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nof1/importance.hpp"
#include "nof1/laplace.hpp"
#include "oracle_values.hpp"
#include "test_util.hpp"

using namespace nof1;
using testutil::params;

namespace {

Dataset normal3() { return Dataset::from(Family::normal, 3, oracle::kNormal3); }
Dataset lognormal3() { return Dataset::from(Family::log_normal, 3, oracle::kLogNormal3); }

Eigen::VectorXd stacked(const PopulationParams& t, const RandomEffects& b) {
  Eigen::VectorXd x(kNumPopulationParams + b.stacked().size());
  x << t.to_vector(), b.stacked();
  return x;
}

double h_at(const Eigen::VectorXd& x, const Dataset& data) {
  return joint_log_density(PopulationParams::from_vector(x.head(kNumPopulationParams)),
                           RandomEffects(Eigen::VectorXd(x.tail(x.size() - kNumPopulationParams))), data);
}

}  // namespace

TEST(JointLogDensity, EmptyDataIsRandomEffectsPrior) {
  const Dataset empty(Family::normal, 3);
  const auto theta = params(oracle::kThetaA);
  const auto b = testutil::effects(oracle::kB3);
  EXPECT_NEAR(joint_log_density(theta, b, empty), random_effects_log_prior(b, theta), 1e-12);
}

TEST(JointLogDensity, DecomposesIntoLikelihoodAndPrior) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> z;
  for (int rep = 0; rep < 50; ++rep) {
    const PopulationParams t{24 + z(rng), z(rng), 1 + 0.3 * z(rng), 0.3 * z(rng), 0.3 * z(rng)};
    RandomEffects b(3);
    for (int i = 1; i <= 3; ++i) b.set_patient(i, {z(rng), z(rng)});
    const double direct = conditional_log_likelihood(oracle::kNormal3, t, b, Family::normal) + random_effects_log_prior(b, t);
    EXPECT_NEAR(joint_log_density(t, b, oracle::kNormal3, Family::normal), direct, 1e-12);
    EXPECT_NEAR(joint_log_density(t, b, normal3()), direct, 1e-10);
  }
}

TEST(JointLogDensity, MatchesScriptedOracle) {
  const auto b = testutil::effects(oracle::kB3);
  EXPECT_NEAR(joint_log_density(params(oracle::kThetaA), b, normal3()), oracle::kJointNormal3, 1e-10);
  EXPECT_NEAR(joint_log_density(params(oracle::kThetaLogNormal), b, lognormal3()), oracle::kJointLogNormal3, 1e-10);
}

TEST(InnerMode, NoDataGivesPriorMode) {
  const auto theta = params(oracle::kThetaA);
  const InnerSolve s = inner_mode(theta, Dataset(Family::normal, 4));
  EXPECT_TRUE(s.converged);
  EXPECT_EQ(s.b_star.stacked(), Eigen::VectorXd::Zero(8));
  for (const auto& h : s.hessian_blocks) {
    EXPECT_NEAR(h(0, 0), -1.0 / theta.omega0(), 1e-14);
    EXPECT_NEAR(h(1, 1), -1.0 / theta.omega1(), 1e-14);
    EXPECT_EQ(h(0, 1), 0.0);
  }
}

TEST(InnerMode, MatchesRidgeSolution) {
  const InnerSolve s = inner_mode(params(oracle::kThetaA), normal3());
  const Eigen::MatrixXd expected = testutil::matrix(oracle::kRidgeModesNormal3A, 3, 2);
  for (int i = 1; i <= 3; ++i) {
    EXPECT_NEAR(s.b_star.patient(i)[0], expected(i - 1, 0), 1e-10);
    EXPECT_NEAR(s.b_star.patient(i)[1], expected(i - 1, 1), 1e-10);
  }
}

TEST(InnerMode, MatchesGridSearch) {
  const std::vector<Observation> one(oracle::kNormal3.begin(), oracle::kNormal3.begin() + 4);
  const Dataset data = Dataset::from(Family::normal, 1, one);
  const auto theta = params(oracle::kThetaA);
  const auto k = detail::theta_terms(theta);
  double best = -1e300;
  Eigen::Vector2d arg;
  for (int i = -2000; i <= 2000; ++i) {
    for (int j = -2000; j <= 2000; ++j) {
      const Eigen::Vector2d b(i * 1e-3, j * 1e-3);
      const double v = detail::patient_joint(data.patient(1), theta, k, b);
      if (v > best) {
        best = v;
        arg = b;
      }
    }
  }
  const InnerSolve s = inner_mode(theta, data);
  EXPECT_NEAR(s.b_star.patient(1)[0], arg[0], 2e-3);
  EXPECT_NEAR(s.b_star.patient(1)[1], arg[1], 2e-3);
}

TEST(InnerMode, GradientVanishesAndCurvatureIsNegativeDefinite) {
  const auto theta = params(oracle::kThetaB);
  const Dataset data = normal3();
  const InnerSolve s = inner_mode(theta, data);
  const Eigen::VectorXd g = joint_gradient(theta, s.b_star, data);
  EXPECT_LT(g.tail(6).cwiseAbs().maxCoeff(), 1e-8);
  for (const auto& h : s.hessian_blocks) EXPECT_TRUE(is_positive_definite(-h));
}

TEST(LaplaceMarginal, GaussianExactnessAgainstFrozenOracle) {
  EXPECT_NEAR(laplace_marginal_loglik(params(oracle::kThetaA), normal3()), oracle::kMarginalNormal3A, 1e-8);
  EXPECT_NEAR(laplace_marginal_loglik(params(oracle::kThetaB), normal3()), oracle::kMarginalNormal3B, 1e-8);
  EXPECT_NEAR(laplace_marginal_loglik(params(oracle::kThetaLogNormal), lognormal3()), oracle::kMarginalLogNormal3, 1e-8);
}

TEST(LaplaceMarginal, EmptyDataIsZero) {
  EXPECT_NEAR(laplace_marginal_loglik(params(oracle::kThetaA), Dataset(Family::normal, 5)), 0.0, 1e-12);
}

TEST(LaplaceMarginal, IndependentPatientsAdd) {
  const auto theta = params(oracle::kThetaA);
  std::vector<Observation> p1, p2, both;
  for (const auto& o : oracle::kNormal3) {
    if (o.patient == 1) p1.push_back(o);
    if (o.patient == 2) p2.push_back({1, o.cycle, o.slot, o.treatment, o.response});
  }
  both = p1;
  for (const auto& o : p2) both.push_back({2, o.cycle, o.slot, o.treatment, o.response});
  EXPECT_NEAR(laplace_marginal_loglik(theta, Dataset::from(Family::normal, 2, both)),
              laplace_marginal_loglik(theta, Dataset::from(Family::normal, 1, p1)) +
                  laplace_marginal_loglik(theta, Dataset::from(Family::normal, 1, p2)),
              1e-12);
}

TEST(JointDerivatives, AnalyticMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  for (const Dataset& data : {normal3(), lognormal3()}) {
    for (int rep = 0; rep < 20; ++rep) {
      const bool ln = data.family() == Family::log_normal;
      const PopulationParams t{(ln ? 3.4 : 24.0) + 0.3 * z(rng), 0.2 * z(rng), (ln ? -1.5 : 1.0) + 0.2 * z(rng),
                               (ln ? -1.2 : 0.3) + 0.2 * z(rng), (ln ? -1.5 : 0.3) + 0.2 * z(rng)};
      RandomEffects b(3);
      for (int i = 1; i <= 3; ++i) b.set_patient(i, {0.5 * z(rng), 0.5 * z(rng)});
      const Eigen::VectorXd x = stacked(t, b);
      auto f = [&](const Eigen::VectorXd& y) { return h_at(y, data); };
      const Eigen::VectorXd g = joint_gradient(t, b, data);
      const Eigen::VectorXd gfd = central_gradient(f, x, 1e-6);
      for (Eigen::Index i = 0; i < x.size(); ++i)
        EXPECT_LE(std::abs(g[i] - gfd[i]), 1e-6 * std::max(1.0, std::abs(g[i]))) << "coordinate " << i;
      const Eigen::MatrixXd h = joint_hessian(t, b, data);
      const Eigen::MatrixXd hfd = central_hessian(f, x, 1e-4);
      for (Eigen::Index i = 0; i < x.size(); ++i)
        for (Eigen::Index j = 0; j < x.size(); ++j)
          EXPECT_LE(std::abs(h(i, j) - hfd(i, j)), 1e-4 * std::max(1.0, std::abs(h(i, j)))) << i << "," << j;
    }
  }
}

TEST(PosteriorMode, EmptyDataGivesPriorMean) {
  const OuterSolve s = posterior_mode(Dataset(Family::normal, 3), PriorSpec::vague());
  EXPECT_TRUE(s.converged);
  const ParamVector expected = PriorSpec::vague().mean();
  for (int i = 0; i < kNumPopulationParams; ++i) EXPECT_NEAR(s.theta.to_vector()[i], expected[i], 1e-6);
}

TEST(PosteriorMode, MatchesIndependentOptimizer) {
  const OuterSolve s = posterior_mode(normal3(), PriorSpec::vague());
  ASSERT_TRUE(s.converged);
  for (int i = 0; i < kNumPopulationParams; ++i)
    EXPECT_NEAR(s.theta.to_vector()[i], oracle::kPosteriorModeNormal3[static_cast<std::size_t>(i)], 1e-4) << i;
}

TEST(PosteriorMode, BeatsRandomPriorDraws) {
  const Dataset data = normal3();
  const PriorSpec prior = PriorSpec::vague();
  const OuterSolve s = posterior_mode(data, prior);
  const double best = log_posterior_population(s.theta, data, prior);
  Rng rng(77);
  const MvnSampler sampler(prior.mean(), prior.covariance());
  for (int i = 0; i < 100; ++i) {
    const PopulationParams t = PopulationParams::from_vector(sampler.draw(rng));
    double v = -std::numeric_limits<double>::infinity();
    try {
      v = log_posterior_population(t, data, prior);
    } catch (const std::exception&) {
    }
    EXPECT_GE(best, v);
  }
}

TEST(AssemblePosterior, EmptyDataPopulationBlockIsPrior) {
  const FitResult fit = fit_posterior(Dataset(Family::normal, 2), PriorSpec::vague());
  const Eigen::MatrixXd expected = PriorSpec::vague().covariance();
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(fit.posterior.population_cov(i, j), expected(i, j), 1e-4 * expected(i, i));
  EXPECT_TRUE(fit.posterior.is_valid());
  EXPECT_EQ(fit.posterior.dim(), 5 + 4);
}

TEST(AssemblePosterior, MatchesIndependentCurvature) {
  const FitResult fit = fit_posterior(normal3(), PriorSpec::vague());
  const Eigen::MatrixXd expected = testutil::matrix(oracle::kPopulationCovNormal3, 5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      EXPECT_NEAR(fit.posterior.population_cov(i, j), expected(i, j),
                  1e-3 * std::sqrt(expected(i, i) * expected(j, j)))
          << i << "," << j;
}

TEST(AssemblePosterior, PinnedVariancesGiveConjugateCovariance) {
  const PriorSpec pinned = testutil::prior_from(oracle::kPinMean, oracle::kPinSd);
  const FitResult fit = fit_posterior(normal3(), pinned);
  const Eigen::MatrixXd expected = testutil::matrix(oracle::kConjugateBetaCovNormal3, 2, 2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(fit.posterior.population_cov(i, j), expected(i, j), 1e-6);
}

TEST(AssemblePosterior, StructureInvariants) {
  const FitResult fit = fit_posterior(normal3(), PriorSpec::vague());
  const PosteriorApprox& p = fit.posterior;
  EXPECT_TRUE(p.is_valid());
  EXPECT_EQ(p.cross_cov, Eigen::MatrixXd::Zero(5, 6));
  EXPECT_EQ(p.population_cov, p.population_cov.transpose());
  EXPECT_EQ(p.random_effects_cov, p.random_effects_cov.transpose());
}

TEST(AssemblePosterior, PatientPermutationOnlyPermutesEffects) {
  const int perm[3] = {3, 1, 2};  // new id of old patient i
  std::vector<Observation> permuted;
  for (const auto& o : oracle::kNormal3) permuted.push_back({perm[o.patient - 1], o.cycle, o.slot, o.treatment, o.response});
  const PosteriorApprox a = fit_posterior(normal3(), PriorSpec::vague()).posterior;
  const PosteriorApprox b = fit_posterior(Dataset::from(Family::normal, 3, permuted), PriorSpec::vague()).posterior;
  EXPECT_LT((a.population_cov - b.population_cov).cwiseAbs().maxCoeff(), 1e-8);
  for (int i = 1; i <= 3; ++i) {
    EXPECT_LT((a.effects(i) - b.effects(perm[i - 1])).cwiseAbs().maxCoeff(), 1e-8);
    const Eigen::Matrix2d ca = a.random_effects_cov.block<2, 2>(2 * (i - 1), 2 * (i - 1));
    const Eigen::Matrix2d cb = b.random_effects_cov.block<2, 2>(2 * (perm[i - 1] - 1), 2 * (perm[i - 1] - 1));
    EXPECT_LT((ca - cb).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(AssemblePosterior, InformationMonotoneWithPinnedVariances) {
  const PriorSpec pinned = testutil::prior_from(oracle::kPinMean, oracle::kPinSd);
  Dataset data(Family::normal, 3);
  double prev = log_det_pd(fit_posterior(data, pinned).posterior.population_cov);
  for (const auto& o : oracle::kNormal3) {
    data.add(o);
    const double cur = log_det_pd(fit_posterior(data, pinned).posterior.population_cov);
    EXPECT_LE(cur, prev + 1e-8);
    prev = cur;
  }
}

TEST(ConditionalLaplace, EmptyDataPriorMode) {
  const PosteriorApprox p = conditional_laplace_posterior(Dataset(Family::normal, 2), PriorSpec::vague());
  EXPECT_TRUE(p.is_valid());
  // Without data the joint mode pulls omega toward zero, so only the fixed effects sit at the prior mean.
  EXPECT_NEAR(p.mean[kBeta0], 0.0, 1e-6);
  EXPECT_NEAR(p.mean[kBeta1], 0.0, 1e-6);
  EXPECT_NEAR(p.mean[kLogSigma], 2.5, 1e-6);
}

TEST(ConditionalLaplace, ValidCovarianceOnData) {
  const PosteriorApprox p = conditional_laplace_posterior(normal3(), PriorSpec::vague());
  EXPECT_TRUE(p.is_valid());
  EXPECT_EQ(p.dim(), 11);
}

TEST(Dataset, RejectsBadObservations) {
  Dataset d(Family::log_normal, 2);
  EXPECT_THROW(d.add({3, 1, 1, 0, 1.0}), ContractError);
  EXPECT_THROW(d.add({1, 1, 1, 2, 1.0}), ContractError);
  EXPECT_THROW(d.add({1, 1, 1, 0, 0.0}), DomainError);
  EXPECT_EQ(d.size(), 0u);
}

TEST(ImportanceSampling, TargetEqualsProposalGivesEqualWeights) {
  const Eigen::VectorXd mean = Eigen::Vector2d(1.0, -2.0);
  Eigen::MatrixXd cov(2, 2);
  cov << 1.0, 0.3, 0.3, 0.5;
  const Eigen::MatrixXd inflated = 2.0 * cov;
  const Eigen::MatrixXd prec = inflated.inverse();
  auto log_target = [&](const Eigen::Ref<const Eigen::VectorXd>& x) {
    const Eigen::VectorXd d = x - mean;
    return -0.5 * d.dot(prec * d);
  };
  ImportanceOptions opt;
  opt.n_draws = 5000;
  opt.keep_samples = true;
  const ImportanceResult r = importance_sample(log_target, mean, cov, opt);
  EXPECT_NEAR(r.ess, 5000.0, 1e-6);
  EXPECT_NEAR(r.weights.maxCoeff(), r.weights.minCoeff(), 1e-15);
  EXPECT_TRUE(r.reliable);
}

TEST(ImportanceSampling, ConjugateNormalMean) {
  // y_j ~ N(mu, 1), mu ~ N(0, 10^2); posterior mean and variance in closed form.
  const std::vector<double> y{1.2, 0.4, 2.1, 1.7, 0.9};
  const double prior_var = 100.0;
  double sum = 0.0;
  for (double v : y) sum += v;
  const double post_var = 1.0 / (1.0 / prior_var + static_cast<double>(y.size()));
  const double post_mean = post_var * sum;
  auto log_target = [&](const Eigen::Ref<const Eigen::VectorXd>& x) {
    double lp = -0.5 * x[0] * x[0] / prior_var;
    for (double v : y) lp += -0.5 * (v - x[0]) * (v - x[0]);
    return lp;
  };
  ImportanceOptions opt;
  opt.n_draws = 20000;
  opt.seed = 4;
  const Eigen::VectorXd m0 = Eigen::VectorXd::Constant(1, post_mean + 0.1);
  const Eigen::MatrixXd c0 = Eigen::MatrixXd::Constant(1, 1, post_var);
  const ImportanceResult r = importance_sample(log_target, m0, c0, opt);
  const double se = std::sqrt(post_var / r.ess);
  EXPECT_NEAR(r.mean[0], post_mean, 3 * se);
  EXPECT_NEAR(r.variance[0], post_var, 0.05 * post_var);
}

TEST(ImportanceSampling, FlagsLowEffectiveSampleSize) {
  auto log_target = [](const Eigen::Ref<const Eigen::VectorXd>& x) { return -0.5 * (x[0] - 8.0) * (x[0] - 8.0) / 0.01; };
  ImportanceOptions opt;
  opt.n_draws = 2000;
  const ImportanceResult r =
      importance_sample(log_target, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1), opt);
  EXPECT_FALSE(r.reliable);
  EXPECT_THROW(importance_sample(log_target, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1),
                                 ImportanceOptions{500}),
               ContractError);
}

TEST(ExactMarginal, MatchesDensityOracle) {
  EXPECT_NEAR(exact_marginal_loglik(testutil::params(oracle::kThetaA), oracle::kNormal3, 3, Family::normal),
              oracle::kMarginalNormal3A, 1e-10);
  EXPECT_NEAR(exact_marginal_loglik(testutil::params(oracle::kThetaB), oracle::kNormal3, 3, Family::normal),
              oracle::kMarginalNormal3B, 1e-10);
  EXPECT_NEAR(exact_marginal_loglik(testutil::params(oracle::kThetaLogNormal), oracle::kLogNormal3, 3, Family::log_normal),
              oracle::kMarginalLogNormal3, 1e-10);
  EXPECT_EQ(exact_marginal_loglik(testutil::params(oracle::kThetaA), oracle::kNormal3, 5, Family::normal),
            exact_marginal_loglik(testutil::params(oracle::kThetaA), oracle::kNormal3, 3, Family::normal));
}

TEST(ImportanceSampling, StudentProposalRecoversConjugateMoments) {
  auto log_target = [](const Eigen::Ref<const Eigen::VectorXd>& x) { return -0.5 * (x[0] - 1.0) * (x[0] - 1.0) / 0.25; };
  ImportanceOptions opt;
  opt.n_draws = 50000;
  opt.t_dof = 4;
  opt.seed = 8;
  const ImportanceResult r =
      importance_sample(log_target, Eigen::VectorXd::Constant(1, 0.8), Eigen::MatrixXd::Constant(1, 1, 0.3), opt);
  EXPECT_TRUE(r.reliable);
  EXPECT_NEAR(r.mean[0], 1.0, 3 * std::sqrt(0.25 / r.ess));
  EXPECT_NEAR(r.variance[0], 0.25, 0.02);
}

TEST(ImportanceSampling, PopulationOracleMatchesConjugateCaseWithPinnedVariances) {
  const PriorSpec pinned = testutil::prior_from(oracle::kPinMean, oracle::kPinSd);
  const PosteriorApprox post = fit_posterior(normal3(), pinned).posterior;
  ImportanceOptions opt;
  opt.n_draws = 100000;
  opt.seed = 12;
  const ImportanceResult r = reference_population_is(oracle::kNormal3, 3, Family::normal, pinned, post, opt);
  ASSERT_TRUE(r.reliable);
  const Eigen::MatrixXd cov = testutil::matrix(oracle::kConjugateBetaCovNormal3, 2, 2);
  for (int k : {kBeta0, kBeta1}) {
    EXPECT_NEAR(r.mean[k], post.mean[k], 3 * std::sqrt(cov(k, k) / r.ess));
    EXPECT_NEAR(r.variance[k], cov(k, k), 0.03 * cov(k, k));
  }
}
