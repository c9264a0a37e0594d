#pragma once

// Live trial sessions: a state machine over Trial with an append-only event log per session.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

#include "nof1/errors.hpp"
#include "nof1/random.hpp"
#include "nof1/serialize.hpp"
#include "nof1/trial.hpp"

namespace nof1::service {

inline constexpr int kApiVersion = 1;
inline constexpr const char* kEventFormat = "nof1.events/1";
inline constexpr int kSummaryDraws = 2000;

/// Error surfaced to clients with a stable code and an HTTP status.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(std::string code, int status, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)), status_(status) {}
  const std::string& code() const { return code_; }
  int status() const { return status_; }

 private:
  std::string code_;
  int status_;
};

inline ServiceError not_found(const std::string& id) { return {"session_not_found", 404, "no session '" + id + "'"}; }
inline ServiceError conflict(const std::string& code, const std::string& m) { return {code, 409, m}; }
inline ServiceError invalid(const std::string& code, const std::string& m) { return {code, 422, m}; }

enum class Status { awaiting_allocation, awaiting_response, complete };

inline std::string_view to_string(Status s) {
  switch (s) {
    case Status::awaiting_allocation: return "awaiting-allocation";
    case Status::awaiting_response: return "awaiting-response";
    case Status::complete: return "complete";
  }
  return "?";
}

inline std::string utc_now() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const std::time_t t = system_clock::to_time_t(now);
  const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

inline std::string new_session_id() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}() ^ static_cast<std::uint64_t>(
                                                          std::chrono::steady_clock::now().time_since_epoch().count())};
  std::lock_guard lock(mu);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
  return buf;
}

/// A recommendation issued at a step, stored until the response arrives.
struct Allocation {
  std::size_t step = 0;
  Recommendation rec;
};

inline Json to_json(const Allocation& a) {
  const Recommendation& r = a.rec;
  Json diag = Json::object();
  diag["policy"] = std::string(to_string(r.policy));
  if (r.utility0 || r.utility1) {
    diag["expected_utility"] = {r.utility0 ? Json(*r.utility0) : Json(nullptr), r.utility1 ? Json(*r.utility1) : Json(nullptr)};
    diag["discarded_draws"] = r.discarded;
    diag["tie"] = r.tie;
  }
  if (r.reward) diag["reward_probability"] = {r.reward->p0, r.reward->p1};
  if (r.pre_randomized) diag["pre_randomized"] = true;
  return Json{{"step", a.step},        {"patient", r.at.patient},   {"cycle", r.at.cycle},
              {"slot", r.at.slot},     {"treatment", r.treatment}, {"diagnostics", diag}};
}

inline Allocation allocation_from_json(const Json& j) {
  Allocation a;
  a.step = j.at("step").get<std::size_t>();
  a.rec.at = {j.at("cycle").get<int>(), j.at("patient").get<int>(), j.at("slot").get<int>()};
  a.rec.treatment = j.at("treatment").get<int>();
  const Json& d = j.at("diagnostics");
  a.rec.policy = parse_policy_kind(d.at("policy").get<std::string>());
  if (d.contains("expected_utility")) {
    const Json& u = d.at("expected_utility");
    if (!u[0].is_null()) a.rec.utility0 = u[0].get<double>();
    if (!u[1].is_null()) a.rec.utility1 = u[1].get<double>();
    a.rec.discarded = d.value("discarded_draws", 0);
    a.rec.tie = d.value("tie", false);
  }
  if (d.contains("reward_probability"))
    a.rec.reward = RewardProbabilities{d.at("reward_probability")[0].get<double>(), d.at("reward_probability")[1].get<double>()};
  a.rec.pre_randomized = d.value("pre_randomized", false);
  return a;
}

struct Interval {
  double mean, sd, lower, upper;
};

inline Interval gaussian_interval(double mean, double var) {
  const double sd = std::sqrt(var);
  return {mean, sd, mean - 1.959964 * sd, mean + 1.959964 * sd};
}

struct PatientSummary {
  int patient;
  Interval effect;  // beta1 + b1_i
  RewardProbabilities preferred;
};

struct PosteriorSummary {
  std::array<Interval, kNumPopulationParams> parameters;
  std::vector<PatientSummary> patients;
};

/// Per-parameter intervals, per-patient effect intervals and preferred-arm probabilities. The
/// probability draws are seeded by (policy seed, step) so the summary is reproducible.
inline PosteriorSummary summarize_posterior(const Trial& trial) {
  const PosteriorApprox& post = trial.posterior();
  const Eigen::MatrixXd cov = post.covariance();
  PosteriorSummary s;
  for (int k = 0; k < kNumPopulationParams; ++k) s.parameters[k] = gaussian_interval(post.mean[k], cov(k, k));
  for (int i = 1; i <= post.n_patients(); ++i) {
    const int j = PosteriorApprox::effect_index(i, 1);
    const double mean = post.mean[kBeta1] + post.mean[j];
    const double var = cov(kBeta1, kBeta1) + cov(j, j) + 2.0 * cov(kBeta1, j);
    Rng rng(derive_seed(trial.spec().policy.seed, Stream::summary,
                        {static_cast<std::uint64_t>(trial.step_index()), static_cast<std::uint64_t>(i)}));
    s.patients.push_back({i, gaussian_interval(mean, var),
                          mab_reward_probability(post, i, trial.spec().family, trial.spec().direction, kSummaryDraws, rng)});
  }
  return s;
}

inline Json to_json(const Interval& iv) {
  return Json{{"mean", iv.mean}, {"sd", iv.sd}, {"lower", iv.lower}, {"upper", iv.upper}};
}

inline Json to_json(const PosteriorSummary& s) {
  Json params = Json::object();
  for (int k = 0; k < kNumPopulationParams; ++k) params[std::string(kParamNames[k])] = to_json(s.parameters[k]);
  Json patients = Json::array();
  for (const auto& p : s.patients)
    patients.push_back(Json{{"patient", p.patient},
                            {"treatment_effect", to_json(p.effect)},
                            {"preferred_probability", {p.preferred.p0, p.preferred.p1}}});
  return Json{{"parameters", params}, {"patients", patients}};
}

namespace detail {

/// Appends one line and fsyncs before returning.
inline void append_durable(const std::filesystem::path& path, const std::string& line) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw std::runtime_error("cannot open " + path.string());
  const std::string data = line + "\n";
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      throw std::runtime_error("cannot write " + path.string());
    }
    off += static_cast<std::size_t>(n);
  }
  const bool synced = ::fsync(fd) == 0;
  ::close(fd);
  if (!synced) throw std::runtime_error("cannot sync " + path.string());
}

inline void sync_directory(const std::filesystem::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
  if (fd < 0) return;
  ::fsync(fd);
  ::close(fd);
}

}  // namespace detail

/// One live trial. Mutations are serialized by `writer_`; readers take `state_` shared and are
/// blocked only while a mutation commits, not while a policy or refit is computing.
class Session {
 public:
  Session(std::string id, TrialSpec spec, std::filesystem::path log, std::string created)
      : id_(std::move(id)), trial_(std::move(spec)), log_(std::move(log)), created_(created), updated_(std::move(created)) {}

  const std::string& id() const { return id_; }

  Status status() const {
    std::shared_lock lock(state_);
    return status_locked();
  }

  Json describe() const {
    std::shared_lock lock(state_);
    Json j{{"api_version", kApiVersion},
           {"id", id_},
           {"status", std::string(to_string(status_locked()))},
           {"created", created_},
           {"updated", updated_},
           {"spec", nof1::to_json(trial_.spec())},
           {"steps_completed", trial_.step_index()},
           {"total_steps", trial_.spec().total_steps()}};
    j["cursor"] = trial_.complete() ? Json(nullptr)
                                    : Json{{"patient", trial_.cursor().patient},
                                           {"cycle", trial_.cursor().cycle},
                                           {"slot", trial_.cursor().slot}};
    Json obs = Json::array();
    for (const auto& o : trial_.observations()) obs.push_back(nof1::to_json(o));
    j["observations"] = obs;
    j["pending_allocation"] = pending_ ? to_json(*pending_) : Json(nullptr);
    return j;
  }

  Json listing() const {
    std::shared_lock lock(state_);
    return Json{{"id", id_},
                {"status", std::string(to_string(status_locked()))},
                {"created", created_},
                {"updated", updated_},
                {"steps_completed", trial_.step_index()},
                {"total_steps", trial_.spec().total_steps()}};
  }

  /// Returns the pending recommendation, computing and persisting it first if there is none.
  Allocation next_allocation() {
    std::lock_guard writer(writer_);
    if (pending_) return *pending_;
    if (trial_.complete()) throw conflict("session_complete", "the trial is complete");
    Allocation a{trial_.step_index(), trial_.recommend()};
    const std::string at = utc_now();
    persist(Json{{"type", "allocation"}, {"at", at}, {"allocation", to_json(a)}});
    std::unique_lock lock(state_);
    pending_ = a;
    updated_ = at;
    return a;
  }

  /// Records the observed outcome at the cursor and refits. Any failure leaves the state as it was.
  PosteriorSummary submit_response(const Observation& obs) {
    std::lock_guard writer(writer_);
    if (trial_.complete()) throw conflict("session_complete", "the trial is complete");
    if (!pending_) throw conflict("allocation_required", "request an allocation before submitting a response");
    const Cursor c = trial_.cursor();
    if (obs.patient != c.patient || obs.cycle != c.cycle || obs.slot != c.slot)
      throw conflict("cursor_mismatch", "expected patient " + std::to_string(c.patient) + ", cycle " +
                                            std::to_string(c.cycle) + ", slot " + std::to_string(c.slot));
    if (obs.treatment != 0 && obs.treatment != 1) throw invalid("invalid_treatment", "treatment must be 0 or 1");
    if (!std::isfinite(obs.response)) throw invalid("invalid_response", "response must be finite");
    try {
      model_scale(trial_.spec().family, obs.response);
    } catch (const DomainError& e) {
      throw invalid("invalid_response", e.what());
    }
    Trial next = trial_;
    try {
      next.record(obs);
    } catch (const InferenceError& e) {
      throw ServiceError("fit_failed", 500, e.what());
    }
    PosteriorSummary summary = summarize_posterior(next);
    const std::string at = utc_now();
    persist(Json{{"type", "response"}, {"at", at}, {"observation", nof1::to_json(obs)}});
    std::unique_lock lock(state_);
    trial_ = std::move(next);
    pending_.reset();
    updated_ = at;
    return summary;
  }

  PosteriorSummary posterior_summary() const {
    std::shared_lock lock(state_);
    return summarize_posterior(trial_);
  }

  /// Copy of the underlying trial state.
  Trial trial() const {
    std::shared_lock lock(state_);
    return trial_;
  }

  void persist_create() const {
    persist(Json{{"type", "create"}, {"format", kEventFormat}, {"id", id_}, {"at", created_}, {"spec", nof1::to_json(trial_.spec())}});
  }

  /// Rebuilds a session by replaying its event log. A torn final line is ignored.
  static std::unique_ptr<Session> replay(const std::filesystem::path& log) {
    std::ifstream in(log);
    if (!in) throw std::runtime_error("cannot read " + log.string());
    std::vector<std::string> lines;
    std::vector<std::uintmax_t> ends;  // byte offset just past each line
    std::uintmax_t offset = 0;
    for (std::string line; std::getline(in, line);) {
      offset += line.size() + 1;
      if (line.empty()) continue;
      lines.push_back(line);
      ends.push_back(offset);
    }
    in.close();
    if (lines.empty()) throw std::runtime_error(log.string() + ": empty event log");
    std::unique_ptr<Session> s;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      Json ev;
      try {
        ev = Json::parse(lines[i]);
      } catch (const Json::parse_error&) {
        if (i + 1 < lines.size() || i == 0)
          throw std::runtime_error(log.string() + ": corrupt event at line " + std::to_string(i + 1));
        // Torn write from a crash: drop it so the next append starts on a fresh line.
        std::filesystem::resize_file(log, ends[i - 1]);
        break;
      }
      const std::string type = ev.at("type").get<std::string>();
      if (i == 0) {
        if (type != "create" || ev.value("format", "") != kEventFormat)
          throw std::runtime_error(log.string() + ": first event is not a session creation");
        s = std::make_unique<Session>(ev.at("id").get<std::string>(), trial_spec_from_json(ev.at("spec")), log,
                                      ev.at("at").get<std::string>());
        continue;
      }
      if (type == "allocation") {
        s->pending_ = allocation_from_json(ev.at("allocation"));
      } else if (type == "response") {
        s->trial_.record(observation_from_json(ev.at("observation")));
        s->pending_.reset();
      } else {
        throw std::runtime_error(log.string() + ": unknown event type '" + type + "'");
      }
      s->updated_ = ev.at("at").get<std::string>();
    }
    return s;
  }

 private:
  Status status_locked() const {
    if (trial_.complete()) return Status::complete;
    return pending_ ? Status::awaiting_response : Status::awaiting_allocation;
  }

  void persist(const Json& event) const { detail::append_durable(log_, event.dump()); }

  std::string id_;
  Trial trial_;
  std::filesystem::path log_;
  std::optional<Allocation> pending_;
  std::string created_;
  std::string updated_;
  mutable std::mutex writer_;
  mutable std::shared_mutex state_;
};

/// All sessions under a data directory, one subdirectory per session holding `events.jsonl`.
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
      const auto log = entry.path() / "events.jsonl";
      if (!entry.is_directory() || !std::filesystem::exists(log)) continue;
      std::shared_ptr<Session> s = Session::replay(log);
      const std::string id = s->id();
      sessions_.emplace(id, std::move(s));
    }
  }

  const std::filesystem::path& directory() const { return dir_; }

  std::shared_ptr<Session> create(TrialSpec spec) {
    try {
      spec.validate();
    } catch (const ContractError& e) {
      throw invalid("invalid_spec", e.what());
    } catch (const DomainError& e) {
      throw invalid("invalid_spec", e.what());
    }
    std::string id;
    {
      std::shared_lock lock(mu_);
      do id = new_session_id();
      while (sessions_.count(id) || std::filesystem::exists(dir_ / id));
    }
    const auto sdir = dir_ / id;
    std::filesystem::create_directories(sdir);
    std::shared_ptr<Session> s;
    try {
      s = std::make_shared<Session>(id, std::move(spec), sdir / "events.jsonl", utc_now());
    } catch (const InferenceError& e) {
      std::filesystem::remove_all(sdir);
      throw ServiceError("fit_failed", 500, e.what());
    }
    s->persist_create();
    detail::sync_directory(sdir);
    detail::sync_directory(dir_);
    std::unique_lock lock(mu_);
    sessions_.emplace(id, s);
    return s;
  }

  std::shared_ptr<Session> get(const std::string& id) const {
    std::shared_lock lock(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw not_found(id);
    return it->second;
  }

  std::vector<std::shared_ptr<Session>> list() const {
    std::shared_lock lock(mu_);
    std::vector<std::shared_ptr<Session>> out;
    for (const auto& [id, s] : sessions_) out.push_back(s);
    return out;
  }

 private:
  std::filesystem::path dir_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

}  // namespace nof1::service
