#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wstta/detector/model.hpp"
#include "wstta/run/report.hpp"
#include "wstta/run/stream_run.hpp"

namespace wstta::server {

struct ApiResult {
  int status = 200;
  nlohmann::json body;
};

enum class Phase { awaiting_fetch, awaiting_label, finished, failed };
const char* phase_name(Phase p);

struct EventRecord {
  std::uint64_t seq = 0;
  double timestamp = 0.0;  // seconds since the Unix epoch
  std::string session;
  std::string kind;  // session_created, frame_served, label_received, step_completed, eval_completed, error
  nlohmann::json payload;

  nlohmann::json to_json() const;
};

struct ServiceOptions {
  std::string state_dir;  // event logs and checkpoints; empty disables persistence
  std::size_t checkpoint_every = 50;
};

/// Rebuilds the RunReport of a session from its event records.
run::RunReport report_from_events(const std::vector<EventRecord>& events);

/// One streaming session. Label handling is serialised by `work_`; readers
/// see the snapshot published at the last step boundary.
class Session {
 public:
  Session(std::string id, detector::DetectorModel model, run::RunConfig config, bool auto_oracle,
          run::TestSet test_set, const ServiceOptions& options);

  const std::string& id() const noexcept { return id_; }

  ApiResult fetch_frame(std::optional<std::uint64_t> frame_id);
  ApiResult submit_label(const nlohmann::json& body);
  ApiResult metrics() const;

  /// Events with seq >= from. Blocks up to `wait_ms` for new ones when none
  /// are available yet. `closed` is set once the session can emit no more.
  std::vector<EventRecord> events_since(std::uint64_t from, int wait_ms, bool* closed) const;

  void close();

 private:
  void emit(const std::string& kind, nlohmann::json payload);
  void publish_snapshot();
  void save_checkpoint(const std::string& name) const;
  ApiResult error(int status, const std::string& code, const std::string& message, bool log = true);

  std::string id_;
  bool auto_oracle_;
  ServiceOptions options_;
  std::string dir_;

  mutable std::mutex work_;
  run::StreamRun run_;
  Phase phase_ = Phase::awaiting_fetch;
  std::optional<sim::Frame> pending_;  // pixels live only between fetch and label
  std::vector<std::uint64_t> consumed_;

  mutable std::mutex log_mutex_;
  mutable std::condition_variable log_cv_;
  std::vector<EventRecord> log_;
  bool closed_ = false;
  nlohmann::json snapshot_;
};

class SessionService {
 public:
  SessionService(detector::DetectorModel default_model, ServiceOptions options);

  ApiResult health() const;
  ApiResult create_session(const std::string& body);
  ApiResult fetch_frame(const std::string& id, std::optional<std::uint64_t> frame_id);
  ApiResult submit_label(const std::string& id, const std::string& body);
  ApiResult metrics(const std::string& id) const;

  std::shared_ptr<Session> find(const std::string& id) const;
  void close_all();

 private:
  std::string new_id();

  detector::DetectorModel default_model_;
  ServiceOptions options_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::pair<std::uint64_t, std::size_t>, run::TestSet> test_sets_;
  std::uint64_t counter_ = 0;
  std::uint64_t id_salt_;
};

}  // namespace wstta::server
