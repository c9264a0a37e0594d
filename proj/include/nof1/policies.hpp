#pragma once

// Treatment-selection policies: expected-KLD maximization, individual-level probability
// matching (MAB), and the pre-randomized balanced N-of-1 sequence.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nof1/errors.hpp"
#include "nof1/kld.hpp"
#include "nof1/laplace.hpp"
#include "nof1/model.hpp"
#include "nof1/parallel.hpp"
#include "nof1/posterior.hpp"
#include "nof1/random.hpp"

namespace nof1 {

enum class PolicyKind { optimal, mab, randomized };

inline std::string_view to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::optimal: return "optimal";
    case PolicyKind::mab: return "mab";
    case PolicyKind::randomized: return "randomized";
  }
  return "unknown";
}

inline PolicyKind parse_policy_kind(std::string_view s) {
  if (s == "optimal" || s == "kld" || s == "optimal-kld") return PolicyKind::optimal;
  if (s == "mab") return PolicyKind::mab;
  if (s == "randomized" || s == "randomised") return PolicyKind::randomized;
  throw ContractError("unknown policy kind '" + std::string(s) + "'");
}

struct PolicyConfig {
  PolicyKind kind = PolicyKind::optimal;
  int q_utility = 200;  // predictive draws per candidate arm
  int q_mab = 1000;     // posterior draws for reward probabilities
  std::uint64_t seed = 1;

  void validate() const {
    if (q_utility < 100) throw ContractError("policy.q_utility must be at least 100");
    if (q_mab < 100) throw ContractError("policy.q_mab must be at least 100");
  }
};

/// Everything a policy looks at when choosing the next allocation.
struct DesignContext {
  const Dataset& data;
  const PriorSpec& prior;
  const PosteriorApprox& current;
  int patient = 1;
  int cycle = 1;
  int slot = 1;
};

struct UtilityEvaluation {
  int treatment = 0;
  double expected_utility = 0.0;
  std::vector<double> per_draw;  // successful draws only
  int discarded = 0;
};

/// One joint draw of (theta, b_i) from the current approximation plus the response noise.
struct PredictiveDraw {
  PopulationParams theta;
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
  double noise = 0.0;
};

/// Sampler over (theta, b_i) for one patient under the current approximation.
inline MvnSampler patient_sampler(const PosteriorApprox& post, int patient) {
  return MvnSampler(post.patient_marginal_mean(patient), post.patient_marginal_cov(patient));
}

inline PredictiveDraw draw_predictive(const MvnSampler& sampler, Rng& rng) {
  const Eigen::VectorXd x = sampler.draw(rng);
  PredictiveDraw d;
  d.theta = PopulationParams::from_vector(x.head(kNumPopulationParams));
  d.b = x.tail<2>();
  d.noise = standard_normal(rng);
  return d;
}

/// KL(refit || current) after adding the simulated response to arm `treatment`.
/// Throws when the simulated response is unusable or the refit fails.
inline double utility_for_draw(const DesignContext& ctx, int treatment, const PredictiveDraw& draw) {
  const double eta = linear_predictor(draw.theta, draw.b, treatment);
  const double z = response_from_noise(ctx.data.family(), eta, std::sqrt(draw.theta.sigma2()), draw.noise);
  if (!std::isfinite(z) || (ctx.data.family() == Family::log_normal && !(z > 0.0)))
    throw DomainError("simulated response outside the model support");
  const Observation obs{ctx.patient, ctx.cycle, ctx.slot, treatment, z};
  FitOptions opt;
  opt.warm_start = ctx.current.theta().to_vector();
  opt.inverse_curvature = ctx.current.population_cov;
  const FitResult refit = fit_posterior(ctx.data.with(obs), ctx.prior, opt);
  return kld_mvn(ctx.current, refit.posterior);
}

/// Monte Carlo expected KLD utility of allocating `treatment` at the cursor. Draw q uses the
/// stream derive_seed(seed, {q}), so two arms evaluated with one seed share random numbers.
inline UtilityEvaluation expected_utility(const DesignContext& ctx, int treatment, int q, std::uint64_t seed,
                                          int threads = 1) {
  if (treatment != 0 && treatment != 1) throw ContractError("treatment must be 0 or 1");
  if (q < 1) throw ContractError("expected_utility: need at least one draw");
  const MvnSampler sampler = patient_sampler(ctx.current, ctx.patient);
  std::vector<double> values(static_cast<std::size_t>(q), std::numeric_limits<double>::quiet_NaN());
  parallel_for(values.size(), threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    const PredictiveDraw draw = draw_predictive(sampler, rng);
    try {
      values[i] = utility_for_draw(ctx, treatment, draw);
    } catch (const std::exception&) {
      values[i] = std::numeric_limits<double>::quiet_NaN();
    }
  });
  UtilityEvaluation out;
  out.treatment = treatment;
  out.per_draw.reserve(values.size());
  double sum = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) {
      out.per_draw.push_back(v);
      sum += v;
    } else {
      ++out.discarded;
    }
  }
  if (out.discarded * 10 > q)
    throw InferenceError("expected_utility: " + std::to_string(out.discarded) + " of " + std::to_string(q) +
                         " refits failed");
  out.expected_utility = sum / static_cast<double>(out.per_draw.size());
  return out;
}

struct OptimalSelection {
  int treatment = 0;
  bool tie = false;
  std::optional<UtilityEvaluation> arm0;
  std::optional<UtilityEvaluation> arm1;
};

/// argmax over two evaluations; an exact tie is settled by a fair coin.
inline OptimalSelection choose_by_utility(std::optional<UtilityEvaluation> e0, std::optional<UtilityEvaluation> e1,
                                          Rng& coin) {
  if (!e0 && !e1) throw InferenceError("select_optimal: both utility evaluations failed");
  OptimalSelection out;
  if (!e1) {
    out.treatment = 0;
  } else if (!e0) {
    out.treatment = 1;
  } else if (e0->expected_utility == e1->expected_utility) {
    out.tie = true;
    out.treatment = uniform01(coin) < 0.5 ? 1 : 0;
  } else {
    out.treatment = e1->expected_utility > e0->expected_utility ? 1 : 0;
  }
  out.arm0 = std::move(e0);
  out.arm1 = std::move(e1);
  return out;
}

/// Evaluates both arms with common random numbers and returns the argmax.
inline OptimalSelection select_optimal(const DesignContext& ctx, int q, std::uint64_t seed, int threads = 1) {
  const std::uint64_t draw_seed = derive_seed(seed, Stream::utility);
  auto attempt = [&](int d) -> std::optional<UtilityEvaluation> {
    try {
      return expected_utility(ctx, d, q, draw_seed, threads);
    } catch (const InferenceError&) {
      return std::nullopt;
    }
  };
  auto e0 = attempt(0);
  auto e1 = attempt(1);
  Rng coin(derive_seed(seed, Stream::policy));
  return choose_by_utility(std::move(e0), std::move(e1), coin);
}

struct RewardProbabilities {
  double p0 = 0.5;
  double p1 = 0.5;
  double of(int treatment) const { return treatment == 1 ? p1 : p0; }
};

inline RewardProbabilities reward_from_count(long wins1, int q) {
  RewardProbabilities out;
  out.p1 = static_cast<double>(wins1) / static_cast<double>(q);
  out.p0 = 1.0 - out.p1;
  return out;
}

/// P(arm d has the better mean response for patient i) from q joint draws of (theta, b_i).
/// Exact ties count for arm 0.
inline RewardProbabilities mab_reward_probability(const PosteriorApprox& post, int patient, Family family,
                                                  Direction direction, int q, Rng& rng) {
  if (q < 1) throw ContractError("mab_reward_probability: need at least one draw");
  const MvnSampler sampler = patient_sampler(post, patient);
  long wins1 = 0;
  for (int s = 0; s < q; ++s) {
    const Eigen::VectorXd x = sampler.draw(rng);
    const PopulationParams t = PopulationParams::from_vector(x.head(kNumPopulationParams));
    const Eigen::Vector2d b = x.tail<2>();
    const double s2 = t.sigma2();
    const double m0 = mean_response(family, linear_predictor(t, b, 0), s2);
    const double m1 = mean_response(family, linear_predictor(t, b, 1), s2);
    const bool one_wins = direction == Direction::lower_is_better ? (m1 < m0) : (m1 > m0);
    wins1 += one_wins ? 1 : 0;
  }
  return reward_from_count(wins1, q);
}

/// Probability matching: arm 1 with probability p1.
inline int mab_select(const RewardProbabilities& p, Rng& rng) { return uniform01(rng) < p.p1 ? 1 : 0; }

/// K cycles of a balanced two-arm sequence, each cycle an independent random order of {0, 1}.
inline std::vector<int> randomized_sequence(int n_cycles, int slots_per_cycle, Rng& rng) {
  if (slots_per_cycle != 2) throw ContractError("randomized_sequence: exactly two slots per cycle are supported");
  if (n_cycles < 0) throw ContractError("randomized_sequence: negative cycle count");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(2 * n_cycles));
  for (int k = 0; k < n_cycles; ++k) {
    const int first = uniform01(rng) < 0.5 ? 1 : 0;
    out.push_back(first);
    out.push_back(1 - first);
  }
  return out;
}

}  // namespace nof1
