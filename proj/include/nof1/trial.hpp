#pragma once

// Adaptive loop: for each cycle k, for each patient i, for each slot j, pick an allocation,
// collect the response, refit the joint posterior.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nof1/errors.hpp"
#include "nof1/laplace.hpp"
#include "nof1/linalg.hpp"
#include "nof1/model.hpp"
#include "nof1/policies.hpp"
#include "nof1/posterior.hpp"
#include "nof1/random.hpp"

namespace nof1 {

struct TrialSpec {
  PriorSpec prior = PriorSpec::vague();
  Family family = Family::normal;
  Direction direction = Direction::lower_is_better;
  int n_patients = 1;
  int n_cycles = 3;
  int slots_per_cycle = 2;
  PolicyConfig policy{};
  int threads = 1;  // workers for the utility refits

  std::size_t total_steps() const {
    return static_cast<std::size_t>(n_patients) * static_cast<std::size_t>(n_cycles) *
           static_cast<std::size_t>(slots_per_cycle);
  }

  void validate() const {
    prior.validate();
    policy.validate();
    if (n_patients < 1) throw ContractError("n_patients must be at least 1");
    if (n_cycles < 0) throw ContractError("n_cycles must be non-negative");
    if (slots_per_cycle != 2) throw ContractError("slots_per_cycle must be 2");
  }
};

struct Cursor {
  int cycle = 1;
  int patient = 1;
  int slot = 1;
  bool operator==(const Cursor&) const = default;
};

/// Position of step t (0-based) in the cycle -> patient -> slot nesting.
inline Cursor cursor_at(const TrialSpec& spec, std::size_t step) {
  const std::size_t m = static_cast<std::size_t>(spec.slots_per_cycle);
  const std::size_t per_cycle = m * static_cast<std::size_t>(spec.n_patients);
  return {static_cast<int>(step / per_cycle) + 1, static_cast<int>((step % per_cycle) / m) + 1,
          static_cast<int>(step % m) + 1};
}

struct Recommendation {
  Cursor at;
  int treatment = 0;
  PolicyKind policy = PolicyKind::randomized;
  std::optional<double> utility0;
  std::optional<double> utility1;
  int discarded = 0;
  bool tie = false;
  std::optional<RewardProbabilities> reward;
  bool pre_randomized = false;
};

/// Trial state: spec, observation log, current posterior. The cursor and all random streams are
/// functions of (spec, number of observations), so the state needs no RNG snapshot to resume.
class Trial {
 public:
  explicit Trial(TrialSpec spec) : spec_(std::move(spec)), data_(spec_.family, spec_.n_patients) {
    spec_.validate();
    posterior_ = fit_posterior(data_, spec_.prior).posterior;
    build_sequences();
  }

  /// Rebuilds a trial from a serialized log and posterior without refitting.
  static Trial restore(TrialSpec spec, std::vector<Observation> observations, PosteriorApprox posterior) {
    Trial t(std::move(spec), 0);
    for (std::size_t i = 0; i < observations.size(); ++i) {
      const Cursor c = cursor_at(t.spec_, i);
      const Observation& o = observations[i];
      if (o.patient != c.patient || o.cycle != c.cycle || o.slot != c.slot)
        throw ContractError("restore: observation " + std::to_string(i) + " is out of loop order");
      t.data_.add(o);
    }
    if (observations.size() > t.spec_.total_steps()) throw ContractError("restore: more observations than steps");
    if (posterior.n_patients() != t.spec_.n_patients || !posterior.is_valid())
      throw ContractError("restore: posterior does not match the trial");
    t.observations_ = std::move(observations);
    t.posterior_ = std::move(posterior);
    t.build_sequences();
    return t;
  }

  const TrialSpec& spec() const { return spec_; }
  const std::vector<Observation>& observations() const { return observations_; }
  const PosteriorApprox& posterior() const { return posterior_; }
  const Dataset& data() const { return data_; }
  std::size_t step_index() const { return observations_.size(); }
  bool complete() const { return observations_.size() >= spec_.total_steps(); }

  Cursor cursor() const {
    if (complete()) throw ContractError("trial is complete");
    return cursor_at(spec_, step_index());
  }

  const std::vector<int>& randomized_sequence(int patient) const {
    if (patient < 1 || patient > spec_.n_patients) throw ContractError("unknown patient id " + std::to_string(patient));
    return sequences_[static_cast<std::size_t>(patient - 1)];
  }

  /// Seed of the policy stream at the current step.
  std::uint64_t step_seed() const {
    return derive_seed(spec_.policy.seed, Stream::policy, {static_cast<std::uint64_t>(step_index())});
  }

  /// Runs the configured policy at the cursor. Pure in the trial state.
  Recommendation recommend() const {
    const Cursor at = cursor();
    Recommendation rec;
    rec.at = at;
    rec.policy = spec_.policy.kind;
    const std::uint64_t seed = step_seed();
    switch (spec_.policy.kind) {
      case PolicyKind::randomized: {
        const auto& seq = randomized_sequence(at.patient);
        rec.treatment = seq[static_cast<std::size_t>((at.cycle - 1) * spec_.slots_per_cycle + (at.slot - 1))];
        rec.pre_randomized = true;
        break;
      }
      case PolicyKind::mab: {
        Rng rng(seed);
        rec.reward = mab_reward_probability(posterior_, at.patient, spec_.family, spec_.direction, spec_.policy.q_mab, rng);
        rec.treatment = mab_select(*rec.reward, rng);
        break;
      }
      case PolicyKind::optimal: {
        const DesignContext ctx{data_, spec_.prior, posterior_, at.patient, at.cycle, at.slot};
        const OptimalSelection sel = select_optimal(ctx, spec_.policy.q_utility, seed, spec_.threads);
        rec.treatment = sel.treatment;
        rec.tie = sel.tie;
        if (sel.arm0) {
          rec.utility0 = sel.arm0->expected_utility;
          rec.discarded += sel.arm0->discarded;
        }
        if (sel.arm1) {
          rec.utility1 = sel.arm1->expected_utility;
          rec.discarded += sel.arm1->discarded;
        }
        break;
      }
    }
    return rec;
  }

  /// Appends the observation at the cursor and refits. On failure the state is unchanged.
  void record(const Observation& obs) {
    const Cursor at = cursor();
    if (obs.patient != at.patient || obs.cycle != at.cycle || obs.slot != at.slot)
      throw ContractError("observation does not match the cursor (expected patient " + std::to_string(at.patient) +
                          ", cycle " + std::to_string(at.cycle) + ", slot " + std::to_string(at.slot) + ")");
    if (obs.treatment != 0 && obs.treatment != 1) throw ContractError("treatment must be 0 or 1");
    model_scale(spec_.family, obs.response);
    Dataset next = data_.with(obs);
    FitOptions opt;
    opt.warm_start = posterior_.theta().to_vector();
    opt.inverse_curvature = posterior_.population_cov;
    FitResult fit = fit_posterior(next, spec_.prior, opt);
    observations_.push_back(obs);
    data_ = std::move(next);
    posterior_ = std::move(fit.posterior);
  }

 private:
  Trial(TrialSpec spec, int) : spec_(std::move(spec)), data_(spec_.family, spec_.n_patients) { spec_.validate(); }

  void build_sequences() {
    sequences_.clear();
    for (int i = 1; i <= spec_.n_patients; ++i) {
      Rng rng(derive_seed(spec_.policy.seed, Stream::randomized, {static_cast<std::uint64_t>(i)}));
      sequences_.push_back(nof1::randomized_sequence(spec_.n_cycles, spec_.slots_per_cycle, rng));
    }
  }

  TrialSpec spec_;
  Dataset data_;
  std::vector<Observation> observations_;
  PosteriorApprox posterior_;
  std::vector<std::vector<int>> sequences_;
};

/// Truth behind a simulated trial. Response noise at (patient, cycle, slot) comes from its own
/// stream of `data_seed`, so paired trials on the same truth share noise.
struct SimulationTruth {
  Scenario scenario;
  RandomEffects effects;
  std::uint64_t data_seed = 1;
};

inline double simulate_at(const SimulationTruth& truth, const Cursor& at, int treatment) {
  Rng rng(derive_seed(truth.data_seed, {static_cast<std::uint64_t>(at.patient), static_cast<std::uint64_t>(at.cycle),
                                        static_cast<std::uint64_t>(at.slot)}));
  return simulate_response(truth.scenario, truth.effects.patient(at.patient), treatment, rng);
}

struct StepResult {
  Recommendation recommendation;
  Observation observation;
};

/// One simulated iteration: recommend, generate the response from the truth, refit.
inline StepResult step(Trial& trial, const SimulationTruth& truth) {
  StepResult out;
  out.recommendation = trial.recommend();
  const Cursor at = out.recommendation.at;
  const int d = out.recommendation.treatment;
  out.observation = {at.patient, at.cycle, at.slot, d, simulate_at(truth, at, d)};
  trial.record(out.observation);
  return out;
}

/// log det of the full joint covariance; block sums when the cross block is zero.
inline double metric_log_det(const PosteriorApprox& post) {
  if (post.cross_cov.isZero(0.0)) return log_det_pd(post.population_cov) + log_det_pd(post.random_effects_cov);
  return log_det_pd(post.covariance());
}

inline double metric_log_det_population(const PosteriorApprox& post) { return log_det_pd(post.population_cov); }

/// Posterior probability that d_best is the better arm for the patient.
inline double metric_best_prob(const PosteriorApprox& post, int patient, int d_best, Family family,
                               Direction direction, int q, Rng& rng) {
  return mab_reward_probability(post, patient, family, direction, q, rng).of(d_best);
}

/// Fraction of each (patient, cycle)'s slots that received the patient's best arm; indexed
/// [patient - 1][cycle - 1]. Cells without observations are NaN.
inline std::vector<std::vector<double>> metric_best_received(std::span<const Observation> trace,
                                                             std::span<const BestArm> best, int n_cycles) {
  const std::size_t n = best.size();
  std::vector<std::vector<double>> hits(n, std::vector<double>(static_cast<std::size_t>(n_cycles), 0.0));
  std::vector<std::vector<double>> count(n, std::vector<double>(static_cast<std::size_t>(n_cycles), 0.0));
  for (const Observation& o : trace) {
    if (o.patient < 1 || static_cast<std::size_t>(o.patient) > n || o.cycle < 1 || o.cycle > n_cycles)
      throw ContractError("metric_best_received: observation outside the trial grid");
    const auto p = static_cast<std::size_t>(o.patient - 1);
    const auto k = static_cast<std::size_t>(o.cycle - 1);
    count[p][k] += 1.0;
    hits[p][k] += o.treatment == best[p].arm ? 1.0 : 0.0;
  }
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < static_cast<std::size_t>(n_cycles); ++k)
      hits[p][k] = count[p][k] > 0.0 ? hits[p][k] / count[p][k] : std::nan("");
  return hits;
}

/// Metrics after all patients finish a cycle.
struct CycleSnapshot {
  int cycle = 0;
  double log_det = 0.0;
  double log_det_population = 0.0;
  std::vector<double> best_prob;      // per patient
  std::vector<double> best_received;  // per patient, this cycle only
};

struct RunOptions {
  int metric_draws = 2000;
  std::uint64_t metric_seed = 1;
};

struct TrialRun {
  Trial trial;
  std::vector<CycleSnapshot> snapshots;
  std::vector<BestArm> best;
};

/// Runs all N * M * K steps of a simulated trial, snapshotting metrics at cycle boundaries.
inline TrialRun run_trial(const TrialSpec& spec, const SimulationTruth& truth, const RunOptions& opt = {}) {
  if (truth.effects.n_patients() != spec.n_patients) throw ContractError("run_trial: truth has the wrong patient count");
  TrialRun run{Trial(spec), {}, {}};
  for (int i = 1; i <= spec.n_patients; ++i) run.best.push_back(true_best_treatment(truth.scenario, truth.effects.patient(i)));
  const std::size_t per_cycle = static_cast<std::size_t>(spec.n_patients * spec.slots_per_cycle);
  while (!run.trial.complete()) {
    step(run.trial, truth);
    const std::size_t done = run.trial.step_index();
    if (done % per_cycle != 0) continue;
    CycleSnapshot snap;
    snap.cycle = static_cast<int>(done / per_cycle);
    const PosteriorApprox& post = run.trial.posterior();
    snap.log_det = metric_log_det(post);
    snap.log_det_population = metric_log_det_population(post);
    const auto received = metric_best_received(run.trial.observations(), run.best, spec.n_cycles);
    for (int i = 1; i <= spec.n_patients; ++i) {
      Rng rng(derive_seed(opt.metric_seed, {static_cast<std::uint64_t>(snap.cycle), static_cast<std::uint64_t>(i)}));
      const int d_best = run.best[static_cast<std::size_t>(i - 1)].arm;
      snap.best_prob.push_back(metric_best_prob(post, i, d_best, spec.family, spec.direction, opt.metric_draws, rng));
      snap.best_received.push_back(received[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(snap.cycle - 1)]);
    }
    run.snapshots.push_back(std::move(snap));
  }
  return run;
}

}  // namespace nof1
