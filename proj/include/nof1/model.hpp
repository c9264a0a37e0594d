#pragma once

// Mixed-effects model for aggregated N-of-1 trials:
//   g(E[y | b_i, d]) = (beta0 + b0_i) + (beta1 + b1_i) d,   b_i ~ N(0, diag(omega0, omega1)),
// with a Normal (identity link) or log-normal response.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "nof1/errors.hpp"
#include "nof1/random.hpp"

namespace nof1 {

inline constexpr double kLog2Pi = 1.83787706640934548356;

enum class Family { normal, log_normal };

/// Whether a lower or a higher mean response is the better outcome for a patient.
enum class Direction { lower_is_better, higher_is_better };

inline std::string_view to_string(Family f) { return f == Family::normal ? "normal" : "lognormal"; }
inline std::string_view to_string(Direction d) { return d == Direction::lower_is_better ? "lower" : "higher"; }

inline Family parse_family(std::string_view s) {
  if (s == "normal") return Family::normal;
  if (s == "lognormal" || s == "log_normal" || s == "log-normal") return Family::log_normal;
  throw ContractError("unknown response family '" + std::string(s) + "'");
}

inline Direction parse_direction(std::string_view s) {
  if (s == "lower" || s == "lower_is_better") return Direction::lower_is_better;
  if (s == "higher" || s == "higher_is_better") return Direction::higher_is_better;
  throw ContractError("unknown direction '" + std::string(s) + "'");
}

/// Index of each coordinate in the unconstrained parameter vector.
enum ParamIndex : int { kBeta0 = 0, kBeta1 = 1, kLogSigma = 2, kLogSqrtOmega0 = 3, kLogSqrtOmega1 = 4 };
inline constexpr int kNumPopulationParams = 5;

inline constexpr std::array<std::string_view, kNumPopulationParams> kParamNames = {
    "beta0", "beta1", "log_sigma", "log_sqrt_omega0", "log_sqrt_omega1"};

using ParamVector = Eigen::Matrix<double, kNumPopulationParams, 1>;

/// Parameter values on their natural scale, as a scenario truth is written.
struct NaturalParams {
  double beta0 = 0.0;
  double beta1 = 0.0;
  double sigma2 = 1.0;
  double omega0 = 1.0;
  double omega1 = 1.0;
};

/// theta = (beta0, beta1, log sigma, log sqrt(omega0), log sqrt(omega1)).
struct PopulationParams {
  double beta0 = 0.0;
  double beta1 = 0.0;
  double log_sigma = 0.0;
  double log_sqrt_omega0 = 0.0;
  double log_sqrt_omega1 = 0.0;

  double sigma2() const { return std::exp(2.0 * log_sigma); }
  double omega0() const { return std::exp(2.0 * log_sqrt_omega0); }
  double omega1() const { return std::exp(2.0 * log_sqrt_omega1); }

  ParamVector to_vector() const {
    ParamVector v;
    v << beta0, beta1, log_sigma, log_sqrt_omega0, log_sqrt_omega1;
    return v;
  }

  static PopulationParams from_vector(const Eigen::Ref<const Eigen::VectorXd>& v) {
    if (v.size() < kNumPopulationParams) throw ContractError("PopulationParams: vector too short");
    return {v[kBeta0], v[kBeta1], v[kLogSigma], v[kLogSqrtOmega0], v[kLogSqrtOmega1]};
  }

  static PopulationParams from_natural(const NaturalParams& p) {
    if (!(p.sigma2 > 0.0)) throw DomainError("sigma2 must be positive");
    if (!(p.omega0 > 0.0)) throw DomainError("omega0 must be positive");
    if (!(p.omega1 > 0.0)) throw DomainError("omega1 must be positive");
    return {p.beta0, p.beta1, 0.5 * std::log(p.sigma2), 0.5 * std::log(p.omega0), 0.5 * std::log(p.omega1)};
  }

  NaturalParams to_natural() const { return {beta0, beta1, sigma2(), omega0(), omega1()}; }

  bool operator==(const PopulationParams&) const = default;
};

/// Stacked per-patient effects (b0_1, b1_1, b0_2, b1_2, ...). Patient ids are 1-based.
class RandomEffects {
 public:
  RandomEffects() = default;
  explicit RandomEffects(int n_patients) : values_(Eigen::VectorXd::Zero(2 * n_patients)) {
    if (n_patients < 0) throw ContractError("RandomEffects: negative patient count");
  }
  explicit RandomEffects(Eigen::VectorXd stacked) : values_(std::move(stacked)) {
    if (values_.size() % 2 != 0) throw ContractError("RandomEffects: stacked vector must have even length");
  }

  int n_patients() const { return static_cast<int>(values_.size() / 2); }

  Eigen::Vector2d patient(int id) const {
    check(id);
    return values_.segment<2>(2 * (id - 1));
  }
  void set_patient(int id, const Eigen::Vector2d& b) {
    check(id);
    values_.segment<2>(2 * (id - 1)) = b;
  }

  const Eigen::VectorXd& stacked() const { return values_; }
  Eigen::VectorXd& stacked() { return values_; }

 private:
  void check(int id) const {
    if (id < 1 || id > n_patients())
      throw ContractError("unknown patient id " + std::to_string(id));
  }

  Eigen::VectorXd values_;
};

/// One recorded response. Treatment is 1 for active, 0 for placebo.
struct Observation {
  int patient = 1;
  int cycle = 1;
  int slot = 1;
  int treatment = 0;
  double response = 0.0;

  bool operator==(const Observation&) const = default;
};

struct NormalPrior {
  double mean = 0.0;
  double sd = 1.0;
};

/// Independent Normal priors on each unconstrained coordinate.
struct PriorSpec {
  std::array<NormalPrior, kNumPopulationParams> coords{};

  /// beta ~ N(0, 100^2); log sigma, log sqrt(omega) ~ N(2.5, 1.6^2).
  static PriorSpec vague() {
    PriorSpec p;
    p.coords = {NormalPrior{0.0, 100.0}, NormalPrior{0.0, 100.0}, NormalPrior{2.5, 1.6}, NormalPrior{2.5, 1.6},
                NormalPrior{2.5, 1.6}};
    return p;
  }

  void validate() const {
    for (int i = 0; i < kNumPopulationParams; ++i) {
      if (!(coords[i].sd > 0.0) || !std::isfinite(coords[i].sd))
        throw ContractError("prior." + std::string(kParamNames[i]) + ".sd must be positive");
      if (!std::isfinite(coords[i].mean))
        throw ContractError("prior." + std::string(kParamNames[i]) + ".mean must be finite");
    }
  }

  ParamVector mean() const {
    ParamVector m;
    for (int i = 0; i < kNumPopulationParams; ++i) m[i] = coords[i].mean;
    return m;
  }

  Eigen::Matrix<double, kNumPopulationParams, kNumPopulationParams> covariance() const {
    ParamVector v;
    for (int i = 0; i < kNumPopulationParams; ++i) v[i] = coords[i].sd * coords[i].sd;
    return v.asDiagonal();
  }
};

/// Generative truth for simulation studies.
struct Scenario {
  NaturalParams truth{25.0, -1.0, 9.0, 2.25, 2.25};
  int n_patients = 20;
  int n_cycles = 3;
  int slots_per_cycle = 2;
  Family family = Family::normal;
  Direction direction = Direction::lower_is_better;
  std::uint64_t seed = 1;

  PopulationParams true_params() const { return PopulationParams::from_natural(truth); }
};

/// Response on the scale of the Gaussian linear predictor (log y for log-normal).
inline double model_scale(Family family, double y) {
  if (family == Family::log_normal) {
    if (!(y > 0.0)) throw DomainError("log-normal response must be positive, got " + std::to_string(y));
    return std::log(y);
  }
  if (!std::isfinite(y)) throw DomainError("response must be finite");
  return y;
}

/// log |dz/dy| for the change of variable to the model scale.
inline double log_jacobian(Family family, double y) { return family == Family::log_normal ? -std::log(y) : 0.0; }

inline double linear_predictor(const PopulationParams& theta, const Eigen::Vector2d& b_i, int d) {
  return (theta.beta0 + b_i[0]) + (theta.beta1 + b_i[1]) * d;
}

/// Conditional mean E[y | b_i, d] given the linear predictor.
inline double mean_response(Family family, double eta, double sigma2) {
  return family == Family::normal ? eta : std::exp(eta + 0.5 * sigma2);
}

/// Maps a standard-normal noise draw to a response.
inline double response_from_noise(Family family, double eta, double sigma, double noise) {
  const double z = eta + sigma * noise;
  return family == Family::normal ? z : std::exp(z);
}

/// sum of log f(y | b, d, theta) over the observations.
inline double conditional_log_likelihood(std::span<const Observation> obs, const PopulationParams& theta,
                                         const RandomEffects& b, Family family) {
  const double sigma2 = theta.sigma2();
  double total = 0.0;
  for (const Observation& o : obs) {
    const Eigen::Vector2d bi = b.patient(o.patient);
    const double z = model_scale(family, o.response);
    const double r = z - linear_predictor(theta, bi, o.treatment);
    total += -0.5 * (kLog2Pi + std::log(sigma2)) - 0.5 * r * r / sigma2 + log_jacobian(family, o.response);
  }
  return total;
}

/// sum over patients of log N(b0_i; 0, omega0) + log N(b1_i; 0, omega1).
inline double random_effects_log_prior(const RandomEffects& b, const PopulationParams& theta) {
  const double w0 = theta.omega0();
  const double w1 = theta.omega1();
  const double base = -kLog2Pi - 0.5 * std::log(w0) - 0.5 * std::log(w1);
  double total = 0.0;
  const Eigen::VectorXd& v = b.stacked();
  for (Eigen::Index i = 0; i + 1 < v.size(); i += 2)
    total += base - 0.5 * v[i] * v[i] / w0 - 0.5 * v[i + 1] * v[i + 1] / w1;
  return total;
}

inline double population_log_prior(const PopulationParams& theta, const PriorSpec& prior) {
  const ParamVector x = theta.to_vector();
  double total = 0.0;
  for (int i = 0; i < kNumPopulationParams; ++i) {
    const double z = (x[i] - prior.coords[i].mean) / prior.coords[i].sd;
    total += -0.5 * kLog2Pi - std::log(prior.coords[i].sd) - 0.5 * z * z;
  }
  return total;
}

/// Draws each patient's frozen effects b_i ~ N(0, diag(omega0, omega1)).
inline RandomEffects draw_patient_effects(const Scenario& scenario, Rng& rng) {
  RandomEffects b(scenario.n_patients);
  const double s0 = std::sqrt(scenario.truth.omega0);
  const double s1 = std::sqrt(scenario.truth.omega1);
  for (int i = 1; i <= scenario.n_patients; ++i) {
    const double b0 = s0 * standard_normal(rng);
    const double b1 = s1 * standard_normal(rng);
    b.set_patient(i, {b0, b1});
  }
  return b;
}

/// One draw of a patient's response under the scenario truth.
inline double simulate_response(const Scenario& scenario, const Eigen::Vector2d& b_i, int d, Rng& rng) {
  const PopulationParams theta = scenario.true_params();
  return response_from_noise(scenario.family, linear_predictor(theta, b_i, d), std::sqrt(scenario.truth.sigma2),
                             standard_normal(rng));
}

struct BestArm {
  int arm = 0;
  bool tie = false;
};

/// Which arm has the better true conditional mean for this patient; exact ties are flagged.
inline BestArm true_best_treatment(const Scenario& scenario, const Eigen::Vector2d& b_i) {
  const PopulationParams theta = scenario.true_params();
  const double m0 = mean_response(scenario.family, linear_predictor(theta, b_i, 0), scenario.truth.sigma2);
  const double m1 = mean_response(scenario.family, linear_predictor(theta, b_i, 1), scenario.truth.sigma2);
  if (m0 == m1) return {0, true};
  const bool one_better = scenario.direction == Direction::lower_is_better ? (m1 < m0) : (m1 > m0);
  return {one_better ? 1 : 0, false};
}

}  // namespace nof1
