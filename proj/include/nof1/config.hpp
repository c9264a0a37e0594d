#pragma once

// YAML study configuration. Errors carry the dotted field path and the 1-based source line.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include <yaml-cpp/yaml.h>

#include "nof1/errors.hpp"
#include "nof1/model.hpp"
#include "nof1/policies.hpp"
#include "nof1/study.hpp"

namespace nof1 {

namespace detail {

inline int line_of(const YAML::Node& n) { return n.Mark().line >= 0 ? n.Mark().line + 1 : 0; }

inline std::string join_path(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

inline void check_keys(const YAML::Node& map, const std::string& path, const std::set<std::string>& allowed) {
  if (!map.IsMap()) throw ConfigError(path, line_of(map), "expected a mapping");
  for (const auto& kv : map) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) throw ConfigError(join_path(path, key), line_of(kv.first), "unknown key");
  }
}

template <class T>
T scalar(const YAML::Node& n, const std::string& path) {
  if (!n.IsScalar()) throw ConfigError(path, line_of(n), "expected a scalar");
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(path, line_of(n), "cannot parse '" + n.Scalar() + "'");
  }
}

template <class T>
void read_into(const YAML::Node& map, const std::string& parent, const char* key, T& out) {
  if (const YAML::Node n = map[key]) out = scalar<T>(n, join_path(parent, key));
}

inline void require(bool ok, const YAML::Node& map, const std::string& parent, const char* key, const char* message) {
  if (ok) return;
  const YAML::Node n = map[key];
  throw ConfigError(join_path(parent, key), n ? line_of(n) : line_of(map), message);
}

inline Scenario parse_scenario(const YAML::Node& n) {
  const std::string p = "scenario";
  check_keys(n, p, {"beta0", "beta1", "sigma2", "omega0", "omega1", "n_patients", "n_cycles", "slots_per_cycle",
                    "family", "direction"});
  Scenario s;
  read_into(n, p, "beta0", s.truth.beta0);
  read_into(n, p, "beta1", s.truth.beta1);
  read_into(n, p, "sigma2", s.truth.sigma2);
  read_into(n, p, "omega0", s.truth.omega0);
  read_into(n, p, "omega1", s.truth.omega1);
  read_into(n, p, "n_patients", s.n_patients);
  read_into(n, p, "n_cycles", s.n_cycles);
  read_into(n, p, "slots_per_cycle", s.slots_per_cycle);
  require(std::isfinite(s.truth.beta0), n, p, "beta0", "must be finite");
  require(std::isfinite(s.truth.beta1), n, p, "beta1", "must be finite");
  require(s.truth.sigma2 > 0 && std::isfinite(s.truth.sigma2), n, p, "sigma2", "must be positive");
  require(s.truth.omega0 > 0 && std::isfinite(s.truth.omega0), n, p, "omega0", "must be positive");
  require(s.truth.omega1 > 0 && std::isfinite(s.truth.omega1), n, p, "omega1", "must be positive");
  require(s.n_patients >= 1, n, p, "n_patients", "must be at least 1");
  require(s.n_cycles >= 0, n, p, "n_cycles", "must be non-negative");
  require(s.slots_per_cycle == 2, n, p, "slots_per_cycle", "only 2 treatments per cycle are supported");
  if (const YAML::Node f = n["family"]) {
    try {
      s.family = parse_family(scalar<std::string>(f, "scenario.family"));
    } catch (const ContractError& e) {
      throw ConfigError("scenario.family", line_of(f), e.what());
    }
  }
  if (const YAML::Node d = n["direction"]) {
    try {
      s.direction = parse_direction(scalar<std::string>(d, "scenario.direction"));
    } catch (const ContractError& e) {
      throw ConfigError("scenario.direction", line_of(d), e.what());
    }
  }
  return s;
}

inline PriorSpec parse_prior(const YAML::Node& n) {
  std::set<std::string> names;
  for (auto name : kParamNames) names.insert(std::string(name));
  check_keys(n, "prior", names);
  PriorSpec prior = PriorSpec::vague();
  for (int i = 0; i < kNumPopulationParams; ++i) {
    const std::string key(kParamNames[i]);
    const YAML::Node c = n[key];
    if (!c) continue;
    const std::string p = "prior." + key;
    check_keys(c, p, {"mean", "sd"});
    read_into(c, p, "mean", prior.coords[i].mean);
    read_into(c, p, "sd", prior.coords[i].sd);
    require(std::isfinite(prior.coords[i].mean), c, p, "mean", "must be finite");
    require(prior.coords[i].sd > 0 && std::isfinite(prior.coords[i].sd), c, p, "sd", "must be positive");
  }
  return prior;
}

inline PolicyConfig parse_policy(const YAML::Node& n, const std::string& p) {
  PolicyConfig cfg;
  if (n.IsScalar()) {
    try {
      cfg.kind = parse_policy_kind(n.Scalar());
    } catch (const ContractError& e) {
      throw ConfigError(p, line_of(n), e.what());
    }
    return cfg;
  }
  check_keys(n, p, {"kind", "q_utility", "q_mab"});
  const YAML::Node kind = n["kind"];
  if (!kind) throw ConfigError(p + ".kind", line_of(n), "is required");
  try {
    cfg.kind = parse_policy_kind(scalar<std::string>(kind, p + ".kind"));
  } catch (const ContractError& e) {
    throw ConfigError(p + ".kind", line_of(kind), e.what());
  }
  read_into(n, p, "q_utility", cfg.q_utility);
  read_into(n, p, "q_mab", cfg.q_mab);
  require(cfg.q_utility >= 100, n, p, "q_utility", "must be at least 100");
  require(cfg.q_mab >= 100, n, p, "q_mab", "must be at least 100");
  return cfg;
}

}  // namespace detail

/// Parses a study config document. `seed_override` replaces `master_seed` when given.
inline StudyConfig parse_study_config(const YAML::Node& root, std::optional<std::uint64_t> seed_override = {}) {
  using namespace detail;
  if (!root || root.IsNull()) throw ConfigError("", 0, "empty config");
  check_keys(root, "", {"scenario", "prior", "policies", "replicates", "master_seed", "metric_draws", "threads"});
  StudyConfig cfg;
  if (const YAML::Node s = root["scenario"]) cfg.scenario = parse_scenario(s);
  if (const YAML::Node p = root["prior"]) cfg.prior = parse_prior(p);
  if (const YAML::Node pols = root["policies"]) {
    if (!pols.IsSequence() || pols.size() == 0)
      throw ConfigError("policies", line_of(pols), "expected a non-empty list");
    cfg.policies.clear();
    for (std::size_t i = 0; i < pols.size(); ++i)
      cfg.policies.push_back(parse_policy(pols[i], "policies[" + std::to_string(i) + "]"));
  }
  read_into(root, "", "replicates", cfg.n_replicates);
  read_into(root, "", "master_seed", cfg.master_seed);
  read_into(root, "", "metric_draws", cfg.metric_draws);
  read_into(root, "", "threads", cfg.threads);
  require(cfg.n_replicates >= 1, root, "", "replicates", "must be at least 1");
  require(cfg.metric_draws >= 100, root, "", "metric_draws", "must be at least 100");
  require(cfg.threads >= 0, root, "", "threads", "must be non-negative");
  if (seed_override) cfg.master_seed = *seed_override;
  cfg.scenario.seed = cfg.master_seed;
  cfg.validate();
  return cfg;
}

inline StudyConfig parse_study_config_text(const std::string& text, std::optional<std::uint64_t> seed_override = {}) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("", e.mark.line >= 0 ? e.mark.line + 1 : 0, e.msg);
  }
  return parse_study_config(root, seed_override);
}

inline StudyConfig load_study_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = {}) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::BadFile&) {
    throw ConfigError("", 0, "cannot read " + path.string());
  } catch (const YAML::ParserException& e) {
    throw ConfigError("", e.mark.line >= 0 ? e.mark.line + 1 : 0, e.msg);
  }
  return parse_study_config(root, seed_override);
}

/// Canonical JSON rendering of a parsed config, used for hashing and manifests.
inline Json to_json(const StudyConfig& c) {
  Json pols = Json::array();
  for (const auto& p : c.policies) pols.push_back(Json{{"kind", std::string(to_string(p.kind))}, {"q_utility", p.q_utility}, {"q_mab", p.q_mab}});
  return Json{{"scenario",
               {{"beta0", c.scenario.truth.beta0},
                {"beta1", c.scenario.truth.beta1},
                {"sigma2", c.scenario.truth.sigma2},
                {"omega0", c.scenario.truth.omega0},
                {"omega1", c.scenario.truth.omega1},
                {"n_patients", c.scenario.n_patients},
                {"n_cycles", c.scenario.n_cycles},
                {"slots_per_cycle", c.scenario.slots_per_cycle},
                {"family", std::string(to_string(c.scenario.family))},
                {"direction", std::string(to_string(c.scenario.direction))}}},
              {"prior", to_json(c.prior)},
              {"policies", pols},
              {"replicates", c.n_replicates},
              {"master_seed", c.master_seed},
              {"metric_draws", c.metric_draws}};
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace nof1
