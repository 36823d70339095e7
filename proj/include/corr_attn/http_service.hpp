#pragma once

// HTTP+JSON front end over a SessionStore.
//
//   POST /sessions                {participant_id, condition, query_ref} -> Session
//   GET  /sessions/{id}                                                  -> Session
//   POST /sessions/{id}/attention {mask: [49 x bool]}                    -> InteractionStep
//   POST /sessions/{id}/decision  {accepted: bool}                       -> Session
//   GET  /queries                                                        -> evaluation-set listing
//   GET  /images/{id}                                                    -> image bytes (local refs only)
//
// Errors are {error: code, message} with status 400, 404, 409 or 500.

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "corr_attn/error.hpp"
#include "corr_attn/session.hpp"

namespace corr_attn {

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownSession:
    case ErrorCode::UnknownQuery:
      return 404;
    case ErrorCode::StaticCondition:
    case ErrorCode::SessionFinalized:
      return 409;
    case ErrorCode::StorageFailure:
    case ErrorCode::IoFailure:
      return 500;
    default:
      return 400;
  }
}

inline std::string content_type_for(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "application/octet-stream";
}

class HttpService {
 public:
  explicit HttpService(SessionStore& store) : store_(store) { routes(); }

  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  /// Blocks until stop() is called.
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }

  /// Binds an ephemeral port and serves on a background thread; returns the port.
  int start_background(const std::string& host = "127.0.0.1") {
    const int port = server_.bind_to_any_port(host);
    if (port < 0) throw Error(ErrorCode::IoFailure, "cannot bind " + host);
    worker_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port;
  }

  void stop() {
    server_.stop();
    if (worker_.joinable()) worker_.join();
  }

  ~HttpService() { stop(); }

 private:
  static void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, ErrorCode code, const std::string& message) {
    send_json(res, {{"error", std::string(to_string(code))}, {"message", message}}, http_status(code));
  }

  template <class Fn>
  static void guarded(httplib::Response& res, Fn&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      send_error(res, e.code(), e.detail());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, ErrorCode::BadRequest, e.what());
    }
  }

  static nlohmann::json parse_body(const httplib::Request& req) {
    auto j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::BadRequest, "request body must be a JSON object");
    return j;
  }

  void routes() {
    server_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        const auto s = store_.create_session(body.at("participant_id").get<std::string>(),
                                             parse_condition(body.at("condition").get<std::string>()),
                                             body.at("query_ref").get<std::string>());
        send_json(res, session_to_json(s, store_.index()), 201);
      });
    });

    server_.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, session_to_json(store_.get(req.matches[1]), store_.index())); });
    });

    server_.Post(R"(/sessions/([^/]+)/attention)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        const auto& cells = body.at("mask");
        if (!cells.is_array() || cells.size() != static_cast<std::size_t>(kCells)) {
          throw Error(ErrorCode::BadRequest, "mask must be an array of 49 booleans");
        }
        std::array<bool, kCells> flags{};
        for (int i = 0; i < kCells; ++i) flags[i] = cells[i].get<bool>();
        const auto step = store_.apply_attention(req.matches[1], AttentionMask::from_bools(flags));
        send_json(res, step_to_json(step, store_.index()));
      });
    });

    server_.Post(R"(/sessions/([^/]+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        const auto s = store_.record_decision(req.matches[1], body.at("accepted").get<bool>());
        send_json(res, session_to_json(s, store_.index()));
      });
    });

    server_.Get("/queries", [this](const httplib::Request&, httplib::Response& res) {
      auto arr = nlohmann::json::array();
      for (const auto& item : store_.evaluation_set().items()) {
        arr.push_back({{"query_ref", item.query_ref},
                       {"image_ref", item.image_ref},
                       {"image_url", item.image_ref.empty() ? "" : "/images/" + item.query_ref}});
      }
      send_json(res, arr);
    });

    server_.Get(R"(/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string id = req.matches[1];
        std::string ref;
        if (const auto* item = store_.evaluation_set().find(id)) {
          ref = item->image_ref;
        } else if (auto pos = store_.index().find(id)) {
          ref = store_.index()[*pos].image_ref;
        } else {
          throw Error(ErrorCode::UnknownQuery, "no image for '" + id + "'");
        }
        if (ref.empty() || ref.find("://") != std::string::npos || !std::filesystem::is_regular_file(ref)) {
          throw Error(ErrorCode::UnknownQuery, "image for '" + id + "' is not a local file");
        }
        std::ifstream in(ref, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        res.set_content(bytes, content_type_for(ref));
      });
    });
  }

  SessionStore& store_;
  httplib::Server server_;
  std::thread worker_;
};

}  // namespace corr_attn
