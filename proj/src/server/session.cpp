#include "wstta/server/session.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "wstta/detector/checkpoint.hpp"
#include "wstta/detector/network.hpp"
#include "wstta/sim/dataset_io.hpp"

namespace wstta::server {

using nlohmann::json;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::string base64(const std::vector<std::uint8_t>& in) {
  static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < in.size(); i += 3) {
    const std::uint32_t b = (std::uint32_t{in[i]} << 16) | (i + 1 < in.size() ? std::uint32_t{in[i + 1]} << 8 : 0) |
                            (i + 2 < in.size() ? std::uint32_t{in[i + 2]} : 0);
    out += table[(b >> 18) & 63];
    out += table[(b >> 12) & 63];
    out += i + 1 < in.size() ? table[(b >> 6) & 63] : '=';
    out += i + 2 < in.size() ? table[b & 63] : '=';
  }
  return out;
}

ApiResult problem(int status, const std::string& code, const std::string& message) {
  return {status, json{{"error", code}, {"message", message}}};
}

json detections_json(const detector::Prediction& p, const std::vector<std::string>& names) {
  json out = json::array();
  for (const detector::Detection& d : p) {
    out.push_back({{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
                   {"category", names.at(d.category)},
                   {"category_index", d.category},
                   {"score", d.score}});
  }
  return out;
}

}  // namespace

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::awaiting_fetch: return "awaiting_fetch";
    case Phase::awaiting_label: return "awaiting_label";
    case Phase::finished: return "finished";
    case Phase::failed: return "failed";
  }
  return "?";
}

json EventRecord::to_json() const {
  return json{{"seq", seq}, {"timestamp", timestamp}, {"session", session}, {"kind", kind}, {"payload", payload}};
}

run::RunReport report_from_events(const std::vector<EventRecord>& events) {
  run::RunReport r;
  for (const EventRecord& e : events) {
    if (e.kind == "session_created") {
      r.config = run::config_from_json(e.payload.at("config"));
      r.model_digest = e.payload.at("model_digest").get<std::string>();
      r.categories = e.payload.at("categories").get<std::vector<std::string>>();
    } else if (e.kind == "step_completed") {
      r.steps.push_back(run::step_from_json(e.payload));
    } else if (e.kind == "eval_completed") {
      r.evals.push_back(run::eval_from_json(e.payload));
    }
  }
  return r;
}

Session::Session(std::string id, detector::DetectorModel model, run::RunConfig config, bool auto_oracle,
                 run::TestSet test_set, const ServiceOptions& options)
    : id_(std::move(id)), auto_oracle_(auto_oracle), options_(options),
      run_(std::move(model), config, std::move(test_set)) {
  if (!options_.state_dir.empty()) {
    dir_ = (std::filesystem::path(options_.state_dir) / "sessions" / id_).string();
    std::filesystem::create_directories(dir_);
  }
  const run::RunReport& rep = run_.report();
  emit("session_created", json{{"config", run::to_json(rep.config)},
                               {"model_digest", rep.model_digest},
                               {"categories", rep.categories},
                               {"auto_oracle", auto_oracle_},
                               {"budget", rep.config.frames}});
  for (const run::EvalRecord& e : rep.evals) emit("eval_completed", run::to_json(e));
  if (run_.done()) {
    phase_ = Phase::finished;
    save_checkpoint("final");
    close();
  }
  publish_snapshot();
}

void Session::emit(const std::string& kind, json payload) {
  std::lock_guard lock(log_mutex_);
  EventRecord e{log_.size(), now_seconds(), id_, kind, std::move(payload)};
  if (!dir_.empty()) {
    std::ofstream f(std::filesystem::path(dir_) / "events.ndjson", std::ios::app);
    f << e.to_json().dump() << '\n';
  }
  log_.push_back(std::move(e));
  log_cv_.notify_all();
}

void Session::close() {
  std::lock_guard lock(log_mutex_);
  closed_ = true;
  log_cv_.notify_all();
}

void Session::publish_snapshot() {
  const run::RunReport& rep = run_.report();
  json steps = json::array(), evals = json::array();
  for (const run::StepRecord& s : rep.steps) steps.push_back(run::to_json(s));
  for (const run::EvalRecord& e : rep.evals) evals.push_back(run::to_json(e));
  json snap{{"id", id_},
            {"config", run::to_json(rep.config)},
            {"model_digest", rep.model_digest},
            {"categories", rep.categories},
            {"auto_oracle", auto_oracle_},
            {"phase", phase_name(phase_)},
            {"position", run_.position()},
            {"budget", rep.config.frames},
            {"momentum", run_.state().m},
            {"steps", std::move(steps)},
            {"evals", std::move(evals)}};
  std::lock_guard lock(log_mutex_);
  snapshot_ = std::move(snap);
}

void Session::save_checkpoint(const std::string& name) const {
  if (dir_.empty()) return;
  detector::save_checkpoint(run_.model(), (std::filesystem::path(dir_) / (name + ".ckpt")).string());
}

ApiResult Session::error(int status, const std::string& code, const std::string& message, bool log) {
  if (log) emit("error", json{{"code", code}, {"message", message}, {"status", status}});
  return problem(status, code, message);
}

ApiResult Session::fetch_frame(std::optional<std::uint64_t> frame_id) {
  std::lock_guard lock(work_);
  if (phase_ == Phase::failed) return error(409, "session_failed", "session stopped after an adaptation error");
  if (phase_ == Phase::awaiting_label)
    return error(409, "frame_pending", "frame " + std::to_string(pending_->frame_id) + " is awaiting its label");
  if (frame_id) {
    if (std::find(consumed_.begin(), consumed_.end(), *frame_id) != consumed_.end())
      return error(410, "frame_consumed", "frame " + std::to_string(*frame_id) + " was already used for adaptation and discarded");
    return error(404, "unknown_frame", "frame " + std::to_string(*frame_id) + " is not the next frame of this stream");
  }
  if (run_.done()) return problem(410, "end_of_stream", "frame budget of " + std::to_string(run_.config().frames) + " exhausted");

  pending_ = run_.current_frame();
  const detector::Prediction pred = detector::predict(run_.model(), pending_->image);
  phase_ = Phase::awaiting_label;
  emit("frame_served", json{{"frame_id", pending_->frame_id}, {"position", run_.position()}, {"detections", pred.size()}});
  publish_snapshot();
  return {200, json{{"frame_id", pending_->frame_id},
                    {"position", run_.position()},
                    {"budget", run_.config().frames},
                    {"width", pending_->image.dim(2)},
                    {"height", pending_->image.dim(1)},
                    {"image_png_base64", base64(sim::encode_png(pending_->image))},
                    {"prediction", detections_json(pred, run_.model().categories)},
                    {"categories", run_.model().categories}}};
}

ApiResult Session::submit_label(const json& body) {
  std::lock_guard lock(work_);
  if (!body.is_object()) return error(400, "invalid_body", "label body must be a JSON object");
  const auto fid = body.find("frame_id");
  if (fid == body.end() || !fid->is_number_unsigned()) return error(400, "invalid_body", "frame_id must be a non-negative integer");
  const std::uint64_t frame_id = fid->get<std::uint64_t>();
  if (phase_ == Phase::failed) return error(409, "session_failed", "session stopped after an adaptation error");
  if (std::find(consumed_.begin(), consumed_.end(), frame_id) != consumed_.end())
    return error(409, "already_labeled", "frame " + std::to_string(frame_id) + " was already labeled");
  if (phase_ != Phase::awaiting_label || pending_->frame_id != frame_id)
    return error(404, "unknown_frame", "frame " + std::to_string(frame_id) + " is not awaiting a label");

  const std::vector<std::string>& names = run_.model().categories;
  adapt::WeakLabel weak;
  std::string source = "operator";
  const auto cats = body.find("categories");
  if (cats == body.end() || cats->is_null()) {
    if (!auto_oracle_) return error(422, "missing_categories", "categories are required unless the session uses the auto oracle");
    weak = run_.oracle_label(*pending_);
    source = "oracle";
  } else {
    if (!cats->is_array()) return error(400, "invalid_body", "categories must be an array of names");
    std::vector<std::size_t> idx;
    for (const json& c : *cats) {
      if (!c.is_string()) return error(400, "invalid_body", "categories must be an array of names");
      const auto it = std::find(names.begin(), names.end(), c.get<std::string>());
      if (it == names.end()) return error(422, "unknown_category", "unknown category '" + c.get<std::string>() + "'");
      idx.push_back(static_cast<std::size_t>(it - names.begin()));
    }
    weak = adapt::WeakLabel(std::move(idx));
  }
  emit("label_received", json{{"frame_id", frame_id}, {"weak", weak.categories()}, {"source", source}});

  std::pair<run::StepRecord, std::optional<run::EvalRecord>> result;
  try {
    result = run_.step(*pending_, weak);
  } catch (const std::exception& e) {
    pending_.reset();
    consumed_.push_back(frame_id);
    phase_ = Phase::failed;
    ApiResult r = error(500, "step_failed", e.what());
    publish_snapshot();
    close();
    return r;
  }
  pending_.reset();
  consumed_.push_back(frame_id);
  const auto& [step, ev] = result;
  emit("step_completed", run::to_json(step));
  if (ev) emit("eval_completed", run::to_json(*ev));
  const std::size_t n = run_.position();
  if (options_.checkpoint_every > 0 && n % options_.checkpoint_every == 0) {
    std::ostringstream name;
    name << "step_" << std::setw(6) << std::setfill('0') << n;
    save_checkpoint(name.str());
  }
  phase_ = run_.done() ? Phase::finished : Phase::awaiting_fetch;
  if (run_.done()) save_checkpoint("final");
  publish_snapshot();
  if (run_.done()) close();
  return {200, json{{"step", run::to_json(step)},
                    {"eval", ev ? run::to_json(*ev) : json(nullptr)},
                    {"position", n},
                    {"budget", run_.config().frames},
                    {"done", run_.done()}}};
}

ApiResult Session::metrics() const {
  std::lock_guard lock(log_mutex_);
  return {200, snapshot_};
}

std::vector<EventRecord> Session::events_since(std::uint64_t from, int wait_ms, bool* closed) const {
  std::unique_lock lock(log_mutex_);
  if (from >= log_.size() && !closed_ && wait_ms > 0) {
    log_cv_.wait_for(lock, std::chrono::milliseconds(wait_ms), [&] { return from < log_.size() || closed_; });
  }
  std::vector<EventRecord> out;
  for (std::size_t i = from; i < log_.size(); ++i) out.push_back(log_[i]);
  if (closed) *closed = closed_;
  return out;
}

SessionService::SessionService(detector::DetectorModel default_model, ServiceOptions options)
    : default_model_(std::move(default_model)), options_(std::move(options)), id_salt_(std::random_device{}()) {
  id_salt_ = (id_salt_ << 32) ^ std::random_device{}();
}

std::string SessionService::new_id() {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << mix64(id_salt_ ^ ++counter_);
  return s.str();
}

ApiResult SessionService::health() const {
  std::lock_guard lock(mutex_);
  return {200, json{{"status", "ok"}, {"sessions", sessions_.size()}, {"categories", default_model_.categories}}};
}

ApiResult SessionService::create_session(const std::string& text) {
  json body;
  try {
    body = text.empty() ? json::object() : json::parse(text);
  } catch (const json::parse_error& e) {
    return problem(400, "invalid_json", e.what());
  }
  if (!body.is_object()) return problem(400, "invalid_body", "session body must be a JSON object");

  bool auto_oracle = false;
  std::optional<std::string> checkpoint;
  json fields = json::object();
  for (auto it = body.begin(); it != body.end(); ++it) {
    if (it.key() == "auto_oracle") {
      if (!it->is_boolean()) return problem(422, "invalid_config", "auto_oracle must be a boolean");
      auto_oracle = it->get<bool>();
    } else if (it.key() == "checkpoint") {
      if (!it->is_string()) return problem(422, "invalid_config", "checkpoint must be a path string");
      checkpoint = it->get<std::string>();
    } else if (it.key() == "budget") {
      fields["frames"] = *it;
    } else {
      fields[it.key()] = *it;
    }
  }
  run::RunConfig config;
  try {
    config = run::config_from_json(fields);
    config.validate();
  } catch (const std::exception& e) {
    return problem(422, "invalid_config", e.what());
  }

  detector::DetectorModel model;
  if (checkpoint) {
    try {
      model = detector::load_checkpoint(*checkpoint);
    } catch (const std::exception& e) {
      return problem(422, "bad_checkpoint", e.what());
    }
  } else {
    model = default_model_;
  }

  run::TestSet tests;
  std::string id;
  {
    std::lock_guard lock(mutex_);
    run::TestSet& slot = test_sets_[{config.data_seed, config.test_frames}];
    if (!slot) slot = run::make_test_set(config.dataset(), config.test_frames);
    tests = slot;
    id = new_id();
  }
  std::shared_ptr<Session> s;
  try {
    s = std::make_shared<Session>(id, std::move(model), config, auto_oracle, tests, options_);
  } catch (const nn::UsageError& e) {
    return problem(422, "invalid_config", e.what());
  }
  {
    std::lock_guard lock(mutex_);
    sessions_[id] = s;
  }
  const ApiResult m = s->metrics();
  return {201, json{{"id", id},
                    {"config", m.body.at("config")},
                    {"categories", m.body.at("categories")},
                    {"budget", config.frames},
                    {"auto_oracle", auto_oracle},
                    {"model_digest", m.body.at("model_digest")}}};
}

std::shared_ptr<Session> SessionService::find(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

ApiResult SessionService::fetch_frame(const std::string& id, std::optional<std::uint64_t> frame_id) {
  const auto s = find(id);
  if (!s) return problem(404, "unknown_session", "no session '" + id + "'");
  return s->fetch_frame(frame_id);
}

ApiResult SessionService::submit_label(const std::string& id, const std::string& text) {
  const auto s = find(id);
  if (!s) return problem(404, "unknown_session", "no session '" + id + "'");
  json body;
  try {
    body = json::parse(text);
  } catch (const json::parse_error& e) {
    return problem(400, "invalid_json", e.what());
  }
  return s->submit_label(body);
}

ApiResult SessionService::metrics(const std::string& id) const {
  const auto s = find(id);
  if (!s) return problem(404, "unknown_session", "no session '" + id + "'");
  return s->metrics();
}

void SessionService::close_all() {
  std::lock_guard lock(mutex_);
  for (auto& [id, s] : sessions_) s->close();
}

}  // namespace wstta::server
