#pragma once

// HTTP routes over SessionStore. Every body carries `api_version`; errors are
// {"api_version": 1, "error": {"code": ..., "message": ...}}.

#include <string>

// Eigen must be parsed before httplib: <resolv.h>, pulled in by httplib, defines a `_res` macro
// that collides with identifiers in Eigen's product kernels.
#include "nof1/service/session.hpp"

#include <httplib.h>

namespace nof1::service {

namespace detail {

inline void send_json(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, Json{{"api_version", kApiVersion}, {"error", {{"code", code}, {"message", message}}}});
}

inline Json parse_body(const httplib::Request& req) {
  Json body;
  try {
    body = Json::parse(req.body);
  } catch (const Json::parse_error& e) {
    throw ServiceError("invalid_json", 400, e.what());
  }
  if (!body.is_object()) throw ServiceError("invalid_json", 400, "request body must be a JSON object");
  if (body.contains("api_version") && body.at("api_version") != kApiVersion)
    throw ServiceError("unsupported_version", 400, "api_version must be " + std::to_string(kApiVersion));
  return body;
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      send_error(res, e.status(), e.code(), e.what());
    } catch (const Json::exception& e) {
      send_error(res, 422, "invalid_request", e.what());
    } catch (const ContractError& e) {
      send_error(res, 422, "invalid_request", e.what());
    } catch (const DomainError& e) {
      send_error(res, 422, "invalid_request", e.what());
    } catch (const InferenceError& e) {
      send_error(res, 500, "fit_failed", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal_error", e.what());
    }
  };
}

inline Json with_version(Json j) {
  j["api_version"] = kApiVersion;
  return j;
}

}  // namespace detail

inline void install_routes(httplib::Server& server, SessionStore& store) {
  using detail::guarded;
  using detail::send_json;
  using detail::with_version;

  server.Post("/sessions", guarded([&store](const httplib::Request& req, httplib::Response& res) {
                const Json body = detail::parse_body(req);
                TrialSpec spec;
                try {
                  spec = trial_spec_from_json(body);
                } catch (const std::exception& e) {
                  throw invalid("invalid_spec", e.what());
                }
                auto s = store.create(std::move(spec));
                send_json(res, 201, s->describe());
              }));

  server.Get("/sessions", guarded([&store](const httplib::Request&, httplib::Response& res) {
               Json list = Json::array();
               for (const auto& s : store.list()) list.push_back(s->listing());
               send_json(res, 200, Json{{"api_version", kApiVersion}, {"sessions", list}});
             }));

  server.Get(R"(/sessions/([0-9a-zA-Z_-]+))", guarded([&store](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, store.get(req.matches[1])->describe());
             }));

  server.Get(R"(/sessions/([0-9a-zA-Z_-]+)/allocation)",
             guarded([&store](const httplib::Request& req, httplib::Response& res) {
               auto s = store.get(req.matches[1]);
               const Allocation a = s->next_allocation();
               send_json(res, 200,
                         with_version({{"session", s->id()},
                                       {"status", std::string(to_string(s->status()))},
                                       {"allocation", to_json(a)}}));
             }));

  server.Post(R"(/sessions/([0-9a-zA-Z_-]+)/responses)",
              guarded([&store](const httplib::Request& req, httplib::Response& res) {
                auto s = store.get(req.matches[1]);
                const Json body = detail::parse_body(req);
                Observation obs;
                try {
                  obs = observation_from_json(body);
                } catch (const Json::exception& e) {
                  throw ServiceError("invalid_request", 422, e.what());
                }
                const PosteriorSummary summary = s->submit_response(obs);
                const Json described = s->describe();
                send_json(res, 200,
                          with_version({{"session", s->id()},
                                        {"status", described.at("status")},
                                        {"steps_completed", described.at("steps_completed")},
                                        {"posterior", to_json(summary)}}));
              }));

  server.Get(R"(/sessions/([0-9a-zA-Z_-]+)/posterior)",
             guarded([&store](const httplib::Request& req, httplib::Response& res) {
               auto s = store.get(req.matches[1]);
               const Json described = s->describe();
               send_json(res, 200,
                         with_version({{"session", s->id()},
                                       {"status", described.at("status")},
                                       {"steps_completed", described.at("steps_completed")},
                                       {"posterior", to_json(s->posterior_summary())}}));
             }));

  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) detail::send_error(res, res.status, res.status == 404 ? "not_found" : "http_error", "no such route");
  });
}

}  // namespace nof1::service
