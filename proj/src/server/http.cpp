#include "wstta/server/http.hpp"

#include <httplib.h>

#include <atomic>

namespace wstta::server {

using nlohmann::json;

namespace {

constexpr int kEventPollMs = 500;

void reply(httplib::Response& res, const ApiResult& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

std::optional<std::uint64_t> query_u64(const httplib::Request& req, const char* key, bool* bad) {
  if (!req.has_param(key)) return std::nullopt;
  const std::string v = req.get_param_value(key);
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used == v.size() && !v.empty() && v[0] != '-') return n;
  } catch (const std::exception&) {
  }
  *bad = true;
  return std::nullopt;
}

}  // namespace

HttpServer::HttpServer(SessionService& service) : service_(service), http_(std::make_unique<httplib::Server>()) {
  httplib::Server& s = *http_;
  s.new_task_queue = [] { return new httplib::ThreadPool(32); };

  s.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) { reply(res, service_.health()); });

  s.Post("/api/sessions", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, service_.create_session(req.body));
  });

  s.Get(R"(/api/sessions/([^/]+)/frame)", [this](const httplib::Request& req, httplib::Response& res) {
    bool bad = false;
    const auto frame_id = query_u64(req, "frame_id", &bad);
    if (bad) return reply(res, {400, json{{"error", "invalid_query"}, {"message", "frame_id must be an integer"}}});
    reply(res, service_.fetch_frame(req.matches[1], frame_id));
  });

  s.Post(R"(/api/sessions/([^/]+)/label)", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, service_.submit_label(req.matches[1], req.body));
  });

  s.Get(R"(/api/sessions/([^/]+)/metrics)", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, service_.metrics(req.matches[1]));
  });

  s.Get(R"(/api/sessions/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::shared_ptr<Session> session = service_.find(req.matches[1]);
    if (!session) {
      return reply(res, {404, json{{"error", "unknown_session"}, {"message", "no session '" + std::string(req.matches[1]) + "'"}}});
    }
    bool bad = false;
    const std::uint64_t from = query_u64(req, "from", &bad).value_or(0);
    const bool follow = !req.has_param("follow") || req.get_param_value("follow") != "0";
    if (bad) return reply(res, {400, json{{"error", "invalid_query"}, {"message", "from must be an integer"}}});
    auto next = std::make_shared<std::uint64_t>(from);
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [session, next, follow](std::size_t, httplib::DataSink& sink) {
      bool closed = false;
      const std::vector<EventRecord> batch = session->events_since(*next, follow ? kEventPollMs : 0, &closed);
      for (const EventRecord& e : batch) {
        const std::string chunk =
            "id: " + std::to_string(e.seq) + "\nevent: " + e.kind + "\ndata: " + e.to_json().dump() + "\n\n";
        if (!sink.write(chunk.data(), chunk.size())) return false;
        *next = e.seq + 1;
      }
      if ((closed || !follow) && batch.empty()) {
        sink.done();
      } else if (batch.empty() && !sink.is_writable()) {
        return false;
      }
      return true;
    });
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return http_->bind_to_any_port(host);
  return http_->bind_to_port(host, port) ? port : -1;
}

bool HttpServer::serve() { return http_->listen_after_bind(); }

void HttpServer::stop() {
  service_.close_all();
  http_->stop();
}

void HttpServer::wait_until_ready() const { http_->wait_until_ready(); }

}  // namespace wstta::server
