#pragma once

#include <memory>
#include <string>

#include "wstta/server/session.hpp"

namespace httplib {
class Server;
}

namespace wstta::server {

/// HTTP + JSON front end of a SessionService, with the event stream served
/// as text/event-stream.
class HttpServer {
 public:
  explicit HttpServer(SessionService& service);
  ~HttpServer();

  /// Binds without serving. port 0 picks a free port; returns the bound
  /// port or -1.
  int bind(const std::string& host, int port);
  /// Serves until stop(); returns false when the listener failed.
  bool serve();
  void stop();
  void wait_until_ready() const;

 private:
  SessionService& service_;
  std::unique_ptr<httplib::Server> http_;
};

}  // namespace wstta::server
