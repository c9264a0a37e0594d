#pragma once

// Replicated simulation studies: every replicate draws one set of patient truths and runs each
// policy on it, so comparisons between policies are paired.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nof1/errors.hpp"
#include "nof1/parallel.hpp"
#include "nof1/random.hpp"
#include "nof1/serialize.hpp"
#include "nof1/trial.hpp"

namespace nof1 {

struct StudyConfig {
  Scenario scenario{};
  PriorSpec prior = PriorSpec::vague();
  std::vector<PolicyConfig> policies{{PolicyKind::optimal}, {PolicyKind::mab}, {PolicyKind::randomized}};
  int n_replicates = 20;
  std::uint64_t master_seed = 1;
  int metric_draws = 2000;
  int threads = 0;  // replicate-level workers, 0 = hardware concurrency

  void validate() const {
    prior.validate();
    PopulationParams::from_natural(scenario.truth);
    if (scenario.n_patients < 1) throw ContractError("scenario.n_patients must be at least 1");
    if (scenario.n_cycles < 0) throw ContractError("scenario.n_cycles must be non-negative");
    if (scenario.slots_per_cycle != 2) throw ContractError("scenario.slots_per_cycle must be 2");
    if (policies.empty()) throw ContractError("at least one policy is required");
    for (const auto& p : policies) p.validate();
    if (n_replicates < 1) throw ContractError("replicates must be at least 1");
    if (metric_draws < 100) throw ContractError("metric_draws must be at least 100");
  }

  /// File-name label for policy i; the kind, suffixed with the index when kinds repeat.
  std::string policy_label(std::size_t i) const {
    const auto kind = policies.at(i).kind;
    const auto same = std::count_if(policies.begin(), policies.end(), [&](const auto& p) { return p.kind == kind; });
    std::string label(to_string(kind));
    return same > 1 ? label + "_" + std::to_string(i) : label;
  }
};

struct ReplicateSeeds {
  std::uint64_t replicate = 0;
  std::uint64_t truths = 0;
  std::uint64_t data = 0;
  std::uint64_t metric = 0;
  std::vector<std::uint64_t> policy;  // one per configured policy
};

inline ReplicateSeeds replicate_seeds(std::uint64_t master, int replicate, std::size_t n_policies) {
  ReplicateSeeds s;
  s.replicate = derive_seed(master, {static_cast<std::uint64_t>(replicate)});
  s.truths = derive_seed(s.replicate, Stream::truths);
  s.data = derive_seed(s.replicate, Stream::data);
  s.metric = derive_seed(s.replicate, Stream::metric);
  for (std::size_t p = 0; p < n_policies; ++p) s.policy.push_back(derive_seed(s.replicate, Stream::policy, {p}));
  return s;
}

struct TrialRecord {
  std::size_t policy_index = 0;
  std::vector<Observation> trace;
  std::vector<CycleSnapshot> snapshots;
};

struct ReplicateRecord {
  int replicate = 0;
  ReplicateSeeds seeds;
  RandomEffects truths;
  std::vector<BestArm> best;
  std::vector<TrialRecord> trials;  // one per policy, in config order
  bool failed = false;
  std::string error;
};

struct StudyResult {
  StudyConfig config;
  std::vector<ReplicateRecord> replicates;

  int failed_replicates() const {
    return static_cast<int>(std::count_if(replicates.begin(), replicates.end(), [](const auto& r) { return r.failed; }));
  }
};

inline TrialSpec trial_spec_for(const StudyConfig& cfg, std::size_t policy_index, std::uint64_t policy_seed) {
  TrialSpec spec;
  spec.prior = cfg.prior;
  spec.family = cfg.scenario.family;
  spec.direction = cfg.scenario.direction;
  spec.n_patients = cfg.scenario.n_patients;
  spec.n_cycles = cfg.scenario.n_cycles;
  spec.slots_per_cycle = cfg.scenario.slots_per_cycle;
  spec.policy = cfg.policies.at(policy_index);
  spec.policy.seed = policy_seed;
  spec.threads = 1;
  return spec;
}

/// Frozen truth for replicate r; identical for every policy.
inline SimulationTruth replicate_truth(const StudyConfig& cfg, const ReplicateSeeds& seeds) {
  Rng rng(seeds.truths);
  SimulationTruth truth{cfg.scenario, draw_patient_effects(cfg.scenario, rng), seeds.data};
  truth.scenario.seed = seeds.replicate;
  return truth;
}

/// A failed trial excludes its whole replicate, recorded with the error.
inline StudyResult run_study(const StudyConfig& cfg) {
  cfg.validate();
  StudyResult result;
  result.config = cfg;
  result.replicates.resize(static_cast<std::size_t>(cfg.n_replicates));
  parallel_for(result.replicates.size(), cfg.threads, [&](std::size_t r) {
    ReplicateRecord& rec = result.replicates[r];
    rec.replicate = static_cast<int>(r) + 1;
    rec.seeds = replicate_seeds(cfg.master_seed, rec.replicate, cfg.policies.size());
    const SimulationTruth truth = replicate_truth(cfg, rec.seeds);
    rec.truths = truth.effects;
    try {
      for (std::size_t p = 0; p < cfg.policies.size(); ++p) {
        const TrialSpec spec = trial_spec_for(cfg, p, rec.seeds.policy[p]);
        TrialRun run = run_trial(spec, truth, RunOptions{cfg.metric_draws, rec.seeds.metric});
        rec.best = run.best;
        rec.trials.push_back({p, run.trial.observations(), std::move(run.snapshots)});
      }
    } catch (const std::exception& e) {
      rec.failed = true;
      rec.error = e.what();
      rec.trials.clear();
    }
  });
  return result;
}

// ---- tabular metrics ---------------------------------------------------------------------------

struct LogDetRow {
  int replicate;
  std::string policy;
  int cycle;
  double log_det;
  double log_det_population;
};

struct PatientMetricRow {
  int replicate;
  std::string policy;
  int cycle;
  int patient;
  int d_best;
  double value;
};

struct MetricTables {
  std::vector<LogDetRow> log_det;
  std::vector<PatientMetricRow> best_prob;
  std::vector<PatientMetricRow> best_received;
};

inline MetricTables metric_tables(const StudyResult& res) {
  MetricTables t;
  for (const auto& rep : res.replicates) {
    if (rep.failed) continue;
    for (const auto& tr : rep.trials) {
      const std::string label = res.config.policy_label(tr.policy_index);
      for (const auto& s : tr.snapshots) {
        t.log_det.push_back({rep.replicate, label, s.cycle, s.log_det, s.log_det_population});
        for (std::size_t i = 0; i < s.best_prob.size(); ++i) {
          const int patient = static_cast<int>(i) + 1;
          t.best_prob.push_back({rep.replicate, label, s.cycle, patient, rep.best[i].arm, s.best_prob[i]});
          t.best_received.push_back({rep.replicate, label, s.cycle, patient, rep.best[i].arm, s.best_received[i]});
        }
      }
    }
  }
  return t;
}

struct SummaryRow {
  std::string policy;
  int cycle;
  int replicates;
  double median_log_det;
  double median_log_det_population;
  double mean_best_prob;
  double mean_best_received;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Per (policy, cycle): median log-determinants across replicates, and patient metrics averaged over
/// replicates and patients. Rows come out in first-appearance policy order, then cycle.
inline std::vector<SummaryRow> summarize(const MetricTables& t) {
  std::vector<std::string> order;
  auto key_of = [&](const std::string& p) {
    auto it = std::find(order.begin(), order.end(), p);
    if (it == order.end()) {
      order.push_back(p);
      return order.size() - 1;
    }
    return static_cast<std::size_t>(it - order.begin());
  };
  struct Acc {
    std::vector<double> ld, ldp;
    double prob_sum = 0, recv_sum = 0;
    int prob_n = 0, recv_n = 0;
  };
  std::map<std::pair<std::size_t, int>, Acc> acc;
  for (const auto& r : t.log_det) {
    auto& a = acc[{key_of(r.policy), r.cycle}];
    a.ld.push_back(r.log_det);
    a.ldp.push_back(r.log_det_population);
  }
  for (const auto& r : t.best_prob) {
    auto& a = acc[{key_of(r.policy), r.cycle}];
    a.prob_sum += r.value;
    ++a.prob_n;
  }
  for (const auto& r : t.best_received) {
    if (!std::isfinite(r.value)) continue;
    auto& a = acc[{key_of(r.policy), r.cycle}];
    a.recv_sum += r.value;
    ++a.recv_n;
  }
  std::vector<SummaryRow> out;
  for (const auto& [key, a] : acc) {
    out.push_back({order[key.first], key.second, static_cast<int>(a.ld.size()), median(a.ld), median(a.ldp),
                   a.prob_n ? a.prob_sum / a.prob_n : std::nan(""), a.recv_n ? a.recv_sum / a.recv_n : std::nan("")});
  }
  return out;
}

inline const SummaryRow* find_summary(const std::vector<SummaryRow>& rows, const std::string& policy, int cycle) {
  for (const auto& r : rows)
    if (r.policy == policy && r.cycle == cycle) return &r;
  return nullptr;
}

// ---- files -------------------------------------------------------------------------------------

inline constexpr const char* kLogDetHeader = "replicate,policy,cycle,log_det,log_det_population";
inline constexpr const char* kBestProbHeader = "replicate,policy,cycle,patient,d_best,prob";
inline constexpr const char* kBestReceivedHeader = "replicate,policy,cycle,patient,d_best,proportion";
inline constexpr const char* kSummaryHeader =
    "policy,cycle,replicates,median_log_det,median_log_det_population,mean_best_prob,mean_best_received";

inline void write_summary(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << kSummaryHeader << '\n';
  for (const auto& r : rows)
    out << r.policy << ',' << r.cycle << ',' << r.replicates << ',' << format_double(r.median_log_det) << ','
        << format_double(r.median_log_det_population) << ',' << format_double(r.mean_best_prob) << ','
        << format_double(r.mean_best_received) << '\n';
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p, const std::string& header) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::string line;
  if (!std::getline(in, line) || line != header) throw ConfigError(p.filename().string(), 1, "unexpected header");
  std::vector<std::vector<std::string>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace detail

/// Writes metric tables, seeds, truths, failures, per-trial traces and the summary into `dir`.
inline void write_study(const StudyResult& res, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "traces");
  const MetricTables t = metric_tables(res);
  {
    auto out = detail::open_out(dir / "logdet.csv");
    out << kLogDetHeader << '\n';
    for (const auto& r : t.log_det)
      out << r.replicate << ',' << r.policy << ',' << r.cycle << ',' << format_double(r.log_det) << ','
          << format_double(r.log_det_population) << '\n';
  }
  auto write_patient = [&](const char* name, const char* header, const std::vector<PatientMetricRow>& rows) {
    auto out = detail::open_out(dir / name);
    out << header << '\n';
    for (const auto& r : rows)
      out << r.replicate << ',' << r.policy << ',' << r.cycle << ',' << r.patient << ',' << r.d_best << ','
          << format_double(r.value) << '\n';
  };
  write_patient("best_prob.csv", kBestProbHeader, t.best_prob);
  write_patient("best_received.csv", kBestReceivedHeader, t.best_received);
  {
    auto out = detail::open_out(dir / "summary.csv");
    write_summary(out, summarize(t));
  }
  {
    auto out = detail::open_out(dir / "seeds.csv");
    out << "replicate,stream,seed\n";
    for (const auto& rep : res.replicates) {
      out << rep.replicate << ",replicate," << rep.seeds.replicate << '\n';
      out << rep.replicate << ",truths," << rep.seeds.truths << '\n';
      out << rep.replicate << ",data," << rep.seeds.data << '\n';
      out << rep.replicate << ",metric," << rep.seeds.metric << '\n';
      for (std::size_t p = 0; p < rep.seeds.policy.size(); ++p)
        out << rep.replicate << ",policy:" << res.config.policy_label(p) << ',' << rep.seeds.policy[p] << '\n';
    }
  }
  {
    auto out = detail::open_out(dir / "truths.csv");
    out << "replicate,patient,b0,b1,d_best,tie\n";
    for (const auto& rep : res.replicates) {
      for (int i = 1; i <= rep.truths.n_patients(); ++i) {
        const Eigen::Vector2d b = rep.truths.patient(i);
        const BestArm best = true_best_treatment(res.config.scenario, b);
        out << rep.replicate << ',' << i << ',' << format_double(b[0]) << ',' << format_double(b[1]) << ','
            << best.arm << ',' << (best.tie ? 1 : 0) << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(dir / "failures.csv");
    out << "replicate,error\n";
    for (const auto& rep : res.replicates)
      if (rep.failed) out << rep.replicate << ",\"" << rep.error << "\"\n";
  }
  for (const auto& rep : res.replicates) {
    for (const auto& tr : rep.trials) {
      auto out = detail::open_out(dir / "traces" /
                                  ("replicate_" + std::to_string(rep.replicate) + "_" +
                                   res.config.policy_label(tr.policy_index) + ".csv"));
      write_observations(out, tr.trace);
    }
  }
}

/// Loads the metric tables written by write_study.
inline MetricTables read_metric_tables(const std::filesystem::path& dir) {
  MetricTables t;
  for (const auto& c : detail::read_csv(dir / "logdet.csv", kLogDetHeader)) {
    if (c.size() != 5) throw ConfigError("logdet.csv", 0, "malformed row");
    t.log_det.push_back({std::stoi(c[0]), c[1], std::stoi(c[2]), std::stod(c[3]), std::stod(c[4])});
  }
  auto read_patient = [&](const char* name, const char* header, std::vector<PatientMetricRow>& rows) {
    for (const auto& c : detail::read_csv(dir / name, header)) {
      if (c.size() != 6) throw ConfigError(name, 0, "malformed row");
      rows.push_back({std::stoi(c[0]), c[1], std::stoi(c[2]), std::stoi(c[3]), std::stoi(c[4]),
                      c[5] == "nan" ? std::nan("") : std::stod(c[5])});
    }
  };
  read_patient("best_prob.csv", kBestProbHeader, t.best_prob);
  read_patient("best_received.csv", kBestReceivedHeader, t.best_received);
  return t;
}

}  // namespace nof1
