#pragma once

// JSON records for posteriors, specs and trial state; CSV observation logs.

#include <cstdio>
#include <cstdlib>
#include <span>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nof1/errors.hpp"
#include "nof1/model.hpp"
#include "nof1/policies.hpp"
#include "nof1/posterior.hpp"
#include "nof1/trial.hpp"

namespace nof1 {

using Json = nlohmann::json;

inline constexpr const char* kTrialFormat = "nof1.trial/1";
inline constexpr const char* kPosteriorFormat = "nof1.posterior/1";

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

namespace detail {

inline Json matrix_to_json(const Eigen::MatrixXd& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const Json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw ContractError(std::string(what) + ": wrong row count");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ContractError(std::string(what) + ": wrong column count");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

}  // namespace detail

inline Json to_json(const PosteriorApprox& p) {
  Json patients = Json::array();
  for (int i = 1; i <= p.n_patients(); ++i) patients.push_back(i);
  std::vector<double> mean(p.mean.data(), p.mean.data() + p.mean.size());
  Json names = Json::array();
  for (auto n : kParamNames) names.push_back(std::string(n));
  return Json{{"format", kPosteriorFormat},
              {"parameters", names},
              {"patients", patients},
              {"mean", mean},
              {"population_cov", detail::matrix_to_json(p.population_cov)},
              {"random_effects_cov", detail::matrix_to_json(p.random_effects_cov)},
              {"cross_cov", detail::matrix_to_json(p.cross_cov)}};
}

inline PosteriorApprox posterior_from_json(const Json& j) {
  const auto n = static_cast<Eigen::Index>(j.at("patients").size());
  const std::vector<double> mean = j.at("mean").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(mean.size()) != kNumPopulationParams + 2 * n)
    throw ContractError("posterior record: mean has the wrong length");
  PosteriorApprox p;
  p.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  p.population_cov = detail::matrix_from_json(j.at("population_cov"), kNumPopulationParams, kNumPopulationParams,
                                              "population_cov");
  p.random_effects_cov = detail::matrix_from_json(j.at("random_effects_cov"), 2 * n, 2 * n, "random_effects_cov");
  p.cross_cov = detail::matrix_from_json(j.at("cross_cov"), kNumPopulationParams, 2 * n, "cross_cov");
  return p;
}

inline Json to_json(const PriorSpec& p) {
  Json j = Json::object();
  for (int i = 0; i < kNumPopulationParams; ++i)
    j[std::string(kParamNames[i])] = {{"mean", p.coords[i].mean}, {"sd", p.coords[i].sd}};
  return j;
}

/// Missing coordinates keep their default.
inline PriorSpec prior_from_json(const Json& j, PriorSpec base = PriorSpec::vague()) {
  if (!j.is_object()) throw ContractError("prior must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    int idx = -1;
    for (int i = 0; i < kNumPopulationParams; ++i)
      if (it.key() == kParamNames[i]) idx = i;
    if (idx < 0) throw ContractError("prior: unknown parameter '" + it.key() + "'");
    if (it->contains("mean")) base.coords[idx].mean = it->at("mean").get<double>();
    if (it->contains("sd")) base.coords[idx].sd = it->at("sd").get<double>();
  }
  base.validate();
  return base;
}

inline Json to_json(const PolicyConfig& p) {
  return Json{{"kind", std::string(to_string(p.kind))}, {"q_utility", p.q_utility}, {"q_mab", p.q_mab}, {"seed", p.seed}};
}

inline PolicyConfig policy_from_json(const Json& j) {
  PolicyConfig p;
  p.kind = parse_policy_kind(j.at("kind").get<std::string>());
  if (j.contains("q_utility")) p.q_utility = j.at("q_utility").get<int>();
  if (j.contains("q_mab")) p.q_mab = j.at("q_mab").get<int>();
  if (j.contains("seed")) p.seed = j.at("seed").get<std::uint64_t>();
  p.validate();
  return p;
}

inline Json to_json(const TrialSpec& s) {
  return Json{{"prior", to_json(s.prior)},
              {"family", std::string(to_string(s.family))},
              {"direction", std::string(to_string(s.direction))},
              {"n_patients", s.n_patients},
              {"n_cycles", s.n_cycles},
              {"slots_per_cycle", s.slots_per_cycle},
              {"policy", to_json(s.policy)}};
}

inline TrialSpec trial_spec_from_json(const Json& j) {
  TrialSpec s;
  if (j.contains("prior")) s.prior = prior_from_json(j.at("prior"));
  if (j.contains("family")) s.family = parse_family(j.at("family").get<std::string>());
  if (j.contains("direction")) s.direction = parse_direction(j.at("direction").get<std::string>());
  s.n_patients = j.at("n_patients").get<int>();
  s.n_cycles = j.at("n_cycles").get<int>();
  if (j.contains("slots_per_cycle")) s.slots_per_cycle = j.at("slots_per_cycle").get<int>();
  if (j.contains("policy")) s.policy = policy_from_json(j.at("policy"));
  s.validate();
  return s;
}

inline Json to_json(const Observation& o) {
  return Json{{"patient", o.patient}, {"cycle", o.cycle}, {"slot", o.slot}, {"treatment", o.treatment},
              {"response", o.response}};
}

inline Observation observation_from_json(const Json& j) {
  return {j.at("patient").get<int>(), j.at("cycle").get<int>(), j.at("slot").get<int>(), j.at("treatment").get<int>(),
          j.at("response").get<double>()};
}

inline Json to_json(const Trial& t) {
  Json obs = Json::array();
  for (const auto& o : t.observations()) obs.push_back(to_json(o));
  return Json{{"format", kTrialFormat}, {"spec", to_json(t.spec())}, {"observations", obs},
              {"posterior", to_json(t.posterior())}};
}

inline Trial trial_from_json(const Json& j) {
  if (j.value("format", "") != kTrialFormat) throw ContractError("not a trial record");
  std::vector<Observation> obs;
  for (const auto& o : j.at("observations")) obs.push_back(observation_from_json(o));
  return Trial::restore(trial_spec_from_json(j.at("spec")), std::move(obs), posterior_from_json(j.at("posterior")));
}

inline constexpr const char* kObservationHeader = "patient,cycle,slot,treatment,response";

/// One record per line under a header.
inline void write_observations(std::ostream& out, std::span<const Observation> obs) {
  out << kObservationHeader << '\n';
  for (const auto& o : obs)
    out << o.patient << ',' << o.cycle << ',' << o.slot << ',' << o.treatment << ',' << format_double(o.response)
        << '\n';
}

inline std::vector<Observation> read_observations(std::istream& in) {
  std::vector<Observation> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line == kObservationHeader) continue;
    Observation o;
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    std::istringstream ss(line);
    if (!(ss >> o.patient >> c1 >> o.cycle >> c2 >> o.slot >> c3 >> o.treatment >> c4 >> o.response) || c1 != ',' ||
        c2 != ',' || c3 != ',' || c4 != ',')
      throw ConfigError("observations", lineno, "malformed observation record");
    out.push_back(o);
  }
  return out;
}

}  // namespace nof1
