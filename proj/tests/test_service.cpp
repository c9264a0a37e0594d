#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "nof1/service/http.hpp"
#include "nof1/service/session.hpp"
#include "test_util.hpp"

using namespace nof1;
using namespace nof1::service;

namespace {

TrialSpec small_spec(PolicyKind kind = PolicyKind::randomized, Family family = Family::normal) {
  TrialSpec s;
  s.family = family;
  s.n_patients = 2;
  s.n_cycles = 1;
  s.policy.kind = kind;
  s.policy.q_utility = 100;
  s.policy.seed = 31;
  return s;
}

Observation at_cursor(const Allocation& a, double y) {
  return {a.rec.at.patient, a.rec.at.cycle, a.rec.at.slot, a.rec.treatment, y};
}

std::string expect_service_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no ServiceError";
  return "";
}

}  // namespace

TEST(Session, StateMachineRunsToCompletion) {
  SessionStore store(testutil::temp_dir("svc_state"));
  auto s = store.create(small_spec());
  EXPECT_EQ(s->status(), Status::awaiting_allocation);
  for (int t = 0; t < 4; ++t) {
    const Allocation a = s->next_allocation();
    EXPECT_EQ(a.step, static_cast<std::size_t>(t));
    EXPECT_EQ(s->status(), Status::awaiting_response);
    const Allocation again = s->next_allocation();
    EXPECT_EQ(to_json(again), to_json(a));
    s->submit_response(at_cursor(a, 24.0 + t));
    EXPECT_EQ(s->status(), t == 3 ? Status::complete : Status::awaiting_allocation);
  }
  EXPECT_EQ(expect_service_error([&] { s->next_allocation(); }), "session_complete");
  EXPECT_EQ(expect_service_error([&] { s->submit_response({1, 1, 1, 0, 1.0}); }), "session_complete");
  EXPECT_EQ(s->describe().at("steps_completed"), 4);
  EXPECT_TRUE(s->describe().at("cursor").is_null());
}

TEST(Session, RejectionsLeaveStateUnchanged) {
  SessionStore store(testutil::temp_dir("svc_reject"));
  auto s = store.create(small_spec(PolicyKind::mab, Family::log_normal));
  EXPECT_EQ(expect_service_error([&] { s->submit_response({1, 1, 1, 0, 30.0}); }), "allocation_required");
  const Allocation a = s->next_allocation();
  const Json before = s->describe();
  EXPECT_EQ(expect_service_error([&] { s->submit_response({2, 1, 1, 0, 30.0}); }), "cursor_mismatch");
  EXPECT_EQ(expect_service_error([&] { s->submit_response({1, 1, 1, 3, 30.0}); }), "invalid_treatment");
  EXPECT_EQ(expect_service_error([&] { s->submit_response({1, 1, 1, 0, -1.0}); }), "invalid_response");
  EXPECT_EQ(expect_service_error([&] { s->submit_response({1, 1, 1, 0, 0.0}); }), "invalid_response");
  EXPECT_EQ(s->describe(), before);
  EXPECT_NO_THROW(s->submit_response(at_cursor(a, 30.0)));
  EXPECT_EQ(expect_service_error([&] { store.get("nope"); }), "session_not_found");
  TrialSpec bad = small_spec();
  bad.n_patients = 0;
  EXPECT_EQ(expect_service_error([&] { store.create(bad); }), "invalid_spec");
}

TEST(Session, DeviationOverridesRecommendation) {
  SessionStore store(testutil::temp_dir("svc_dev"));
  auto s = store.create(small_spec());
  const Allocation a = s->next_allocation();
  Observation o = at_cursor(a, 25.0);
  o.treatment = 1 - a.rec.treatment;
  s->submit_response(o);
  EXPECT_EQ(s->trial().observations().at(0).treatment, 1 - a.rec.treatment);
}

TEST(Session, PriorOnlySummary) {
  SessionStore store(testutil::temp_dir("svc_prior"));
  auto s = store.create(small_spec());
  const PosteriorSummary p = s->posterior_summary();
  EXPECT_NEAR(p.parameters[kBeta0].mean, 0.0, 1e-6);
  EXPECT_NEAR(p.parameters[kBeta0].upper, 196.0, 0.01);
  EXPECT_NEAR(p.parameters[kBeta0].lower, -196.0, 0.01);
  ASSERT_EQ(p.patients.size(), 2u);
  EXPECT_EQ(p.patients[0].preferred.p0 + p.patients[0].preferred.p1, 1.0);
  const Json j = to_json(p);
  EXPECT_TRUE(j.at("parameters").contains("log_sqrt_omega1"));
  EXPECT_EQ(j.at("patients").size(), 2u);
}

TEST(Session, ReplayRestoresStateAndIgnoresTornTail) {
  const auto dir = testutil::temp_dir("svc_replay");
  std::string id;
  Json described;
  {
    SessionStore store(dir);
    auto s = store.create(small_spec(PolicyKind::optimal));
    id = s->id();
    s->submit_response(at_cursor(s->next_allocation(), 23.5));
    s->next_allocation();
    described = s->describe();
  }
  {
    SessionStore reopened(dir);
    auto s = reopened.get(id);
    EXPECT_EQ(s->describe(), described);
    EXPECT_EQ(s->status(), Status::awaiting_response);
  }
  std::ofstream(dir / id / "events.jsonl", std::ios::app) << "{\"type\": \"resp";
  {
    SessionStore torn(dir);
    auto s = torn.get(id);
    EXPECT_EQ(s->describe(), described);
    EXPECT_EQ(torn.list().size(), 1u);
    s->submit_response(at_cursor(s->next_allocation(), 26.0));
    described = s->describe();
  }
  SessionStore again(dir);
  EXPECT_EQ(again.get(id)->describe(), described);
  EXPECT_EQ(again.get(id)->trial().step_index(), 2u);
}

TEST(Session, FedSimulatedTraceReproducesPosteriorBitForBit) {
  Scenario sc;
  sc.n_patients = 3;
  sc.n_cycles = 2;
  for (PolicyKind kind : {PolicyKind::randomized, PolicyKind::mab, PolicyKind::optimal}) {
    TrialSpec spec = small_spec(kind);
    spec.n_patients = 3;
    spec.n_cycles = 2;
    Rng rng(5);
    const SimulationTruth truth{sc, draw_patient_effects(sc, rng), 6};
    const TrialRun run = run_trial(spec, truth);
    SessionStore store(testutil::temp_dir("svc_trace"));
    auto s = store.create(spec);
    for (const Observation& o : run.trial.observations()) {
      const Allocation a = s->next_allocation();
      ASSERT_EQ(a.rec.treatment, o.treatment) << to_string(kind);
      s->submit_response(o);
    }
    const Trial live = s->trial();
    EXPECT_EQ(live.posterior().mean, run.trial.posterior().mean);
    EXPECT_EQ(live.posterior().population_cov, run.trial.posterior().population_cov);
    EXPECT_EQ(live.posterior().random_effects_cov, run.trial.posterior().random_effects_cov);
  }
}

TEST(Session, AllocationJsonRoundTrip) {
  Allocation a;
  a.step = 3;
  a.rec.at = {2, 1, 2};
  a.rec.treatment = 1;
  a.rec.policy = PolicyKind::optimal;
  a.rec.utility0 = 0.25;
  a.rec.utility1 = 0.5;
  a.rec.discarded = 2;
  const Allocation b = allocation_from_json(to_json(a));
  EXPECT_EQ(b.rec.at, a.rec.at);
  EXPECT_EQ(to_json(b), to_json(a));
}

class HttpApi : public ::testing::Test {
 protected:
  void SetUp() override {
    store_ = std::make_unique<SessionStore>(testutil::temp_dir("http"));
    install_routes(server_, *store_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }

  std::pair<int, Json> get(const std::string& path) {
    auto r = client_->Get(path);
    return {r->status, Json::parse(r->body)};
  }
  std::pair<int, Json> post(const std::string& path, const std::string& body) {
    auto r = client_->Post(path, body, "application/json");
    return {r->status, Json::parse(r->body)};
  }

  std::unique_ptr<SessionStore> store_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::unique_ptr<httplib::Client> client_;
};

TEST_F(HttpApi, FullSessionLoop) {
  auto [st, created] = post("/sessions", R"({"api_version": 1, "n_patients": 1, "n_cycles": 1,
      "policy": {"kind": "mab", "seed": 4}})");
  ASSERT_EQ(st, 201) << created.dump();
  const std::string id = created.at("id");
  EXPECT_EQ(created.at("status"), "awaiting-allocation");
  EXPECT_EQ(created.at("total_steps"), 2);

  auto [lst, listed] = get("/sessions");
  EXPECT_EQ(lst, 200);
  EXPECT_EQ(listed.at("sessions").size(), 1u);

  for (int t = 0; t < 2; ++t) {
    auto [ast, alloc] = get("/sessions/" + id + "/allocation");
    ASSERT_EQ(ast, 200) << alloc.dump();
    EXPECT_EQ(alloc.at("status"), "awaiting-response");
    const Json& a = alloc.at("allocation");
    EXPECT_EQ(a.at("diagnostics").at("policy"), "mab");
    const Json obs{{"api_version", 1}, {"patient", a.at("patient")}, {"cycle", a.at("cycle")},
                   {"slot", a.at("slot")}, {"treatment", a.at("treatment")}, {"response", 24.5 - t}};
    auto [rst, resp] = post("/sessions/" + id + "/responses", obs.dump());
    ASSERT_EQ(rst, 200) << resp.dump();
    EXPECT_EQ(resp.at("steps_completed"), t + 1);
    EXPECT_TRUE(resp.at("posterior").at("parameters").contains("beta1"));
  }
  auto [gst, got] = get("/sessions/" + id);
  EXPECT_EQ(gst, 200);
  EXPECT_EQ(got.at("status"), "complete");
  EXPECT_EQ(got.at("observations").size(), 2u);
  auto [pst, post_] = get("/sessions/" + id + "/posterior");
  EXPECT_EQ(pst, 200);
  EXPECT_EQ(post_.at("api_version"), 1);
  auto [cst, done] = get("/sessions/" + id + "/allocation");
  EXPECT_EQ(cst, 409);
  EXPECT_EQ(done.at("error").at("code"), "session_complete");
}

TEST_F(HttpApi, ErrorCodes) {
  auto [s1, b1] = get("/sessions/abc");
  EXPECT_EQ(s1, 404);
  EXPECT_EQ(b1.at("error").at("code"), "session_not_found");
  auto [s2, b2] = post("/sessions", "{not json");
  EXPECT_EQ(s2, 400);
  EXPECT_EQ(b2.at("error").at("code"), "invalid_json");
  auto [s3, b3] = post("/sessions", R"({"api_version": 2, "n_patients": 1, "n_cycles": 1})");
  EXPECT_EQ(s3, 400);
  EXPECT_EQ(b3.at("error").at("code"), "unsupported_version");
  auto [s4, b4] = post("/sessions", R"({"n_patients": 0, "n_cycles": 1})");
  EXPECT_EQ(s4, 422);
  EXPECT_EQ(b4.at("error").at("code"), "invalid_spec");
  auto [s5, b5] = get("/nowhere");
  EXPECT_EQ(s5, 404);
  EXPECT_EQ(b5.at("error").at("code"), "not_found");

  auto [s6, created] = post("/sessions", R"({"n_patients": 1, "n_cycles": 1, "family": "lognormal"})");
  ASSERT_EQ(s6, 201);
  const std::string id = created.at("id");
  auto [s7, b7] = post("/sessions/" + id + "/responses", R"({"patient": 1, "cycle": 1, "slot": 1, "treatment": 0, "response": 3})");
  EXPECT_EQ(s7, 409);
  EXPECT_EQ(b7.at("error").at("code"), "allocation_required");
  get("/sessions/" + id + "/allocation");
  auto [s8, b8] = post("/sessions/" + id + "/responses", R"({"patient": 1, "cycle": 1, "slot": 1, "treatment": 0, "response": -1})");
  EXPECT_EQ(s8, 422);
  EXPECT_EQ(b8.at("error").at("code"), "invalid_response");
  auto [s9, b9] = post("/sessions/" + id + "/responses", R"({"patient": 1})");
  EXPECT_EQ(s9, 422);
  EXPECT_EQ(b9.at("error").at("code"), "invalid_request");
}
