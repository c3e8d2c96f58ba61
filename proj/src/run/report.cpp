#include "wstta/run/report.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace wstta::run {

using nlohmann::json;

const char* run_method_name(RunMethod m) {
  switch (m) {
    case RunMethod::source: return "source";
    case RunMethod::bn_stats: return "bn-stats";
    case RunMethod::dua: return "dua";
    case RunMethod::wstta: return "wstta";
    case RunMethod::oracle_ft: return "oracle-ft";
  }
  return "?";
}

RunMethod parse_run_method(const std::string& name) {
  for (RunMethod m : {RunMethod::source, RunMethod::bn_stats, RunMethod::dua, RunMethod::wstta, RunMethod::oracle_ft}) {
    if (name == run_method_name(m)) return m;
  }
  throw nn::UsageError("unknown method '" + name + "' (expected source, bn-stats, dua, wstta or oracle-ft)");
}

adapt::AdaptationConfig RunConfig::adaptation() const {
  adapt::AdaptationConfig a;
  switch (method) {
    case RunMethod::source:
    case RunMethod::oracle_ft: a.method = adapt::Method::source; break;
    case RunMethod::bn_stats: a.method = adapt::Method::bn_stats; break;
    case RunMethod::dua: a.method = adapt::Method::dua; break;
    case RunMethod::wstta: a.method = adapt::Method::wstta; break;
  }
  a.omega = omega;
  a.delta = delta;
  a.lambda = lambda;
  a.alpha = alpha;
  a.tau = tau;
  a.seed = seed;
  return a;
}

sim::DatasetSpec RunConfig::dataset() const {
  sim::DatasetSpec d;
  d.seed = data_seed;
  return d;
}

void RunConfig::validate() const {
  adaptation().validate();
  const sim::DatasetSpec d = dataset();
  if (frames > d.target_stream) throw nn::UsageError("frames exceeds the target stream length " + std::to_string(d.target_stream));
  if (test_frames == 0 || test_frames > d.target_test)
    throw nn::UsageError("test_frames must lie in [1, " + std::to_string(d.target_test) + "]");
  if (!(noise >= 0.0 && noise <= 1.0)) throw nn::UsageError("noise must lie in [0,1]");
}

std::optional<double> RunReport::final_map50() const {
  if (evals.empty()) return std::nullopt;
  return evals.back().map50;
}

std::vector<double> RunReport::momentum_trajectory() const {
  std::vector<double> out;
  for (const StepRecord& s : steps) out.push_back(s.momentum);
  return out;
}

bool RunReport::same_results(const RunReport& other) const {
  return config == other.config && model_digest == other.model_digest && categories == other.categories &&
         steps == other.steps && evals == other.evals;
}

json to_json(const RunConfig& c) {
  return json{{"method", run_method_name(c.method)},
              {"omega", c.omega},
              {"delta", c.delta},
              {"lambda", c.lambda},
              {"alpha", c.alpha},
              {"tau", c.tau},
              {"frames", c.frames},
              {"noise", c.noise},
              {"seed", c.seed},
              {"eval_every", c.eval_every},
              {"test_frames", c.test_frames},
              {"data_seed", c.data_seed},
              {"oracle_steps", c.oracle_steps}};
}

RunConfig config_from_json(const json& j, RunConfig c) {
  if (!j.is_object()) throw nn::UsageError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    auto number = [&]() {
      if (!v.is_number()) throw nn::UsageError("config field '" + k + "' must be a number");
      return v.get<double>();
    };
    auto count = [&]() {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw nn::UsageError("config field '" + k + "' must be a non-negative integer");
      return v.get<std::uint64_t>();
    };
    if (k == "method") {
      if (!v.is_string()) throw nn::UsageError("config field 'method' must be a string");
      c.method = parse_run_method(v.get<std::string>());
    } else if (k == "omega") c.omega = number();
    else if (k == "delta") c.delta = number();
    else if (k == "lambda") c.lambda = number();
    else if (k == "alpha") c.alpha = number();
    else if (k == "tau") c.tau = number();
    else if (k == "noise") c.noise = number();
    else if (k == "frames") c.frames = count();
    else if (k == "seed") c.seed = count();
    else if (k == "eval_every") c.eval_every = count();
    else if (k == "test_frames") c.test_frames = count();
    else if (k == "data_seed") c.data_seed = count();
    else if (k == "oracle_steps") c.oracle_steps = count();
    else throw nn::UsageError("unknown config field '" + k + "'");
  }
  return c;
}

json to_json(const StepRecord& s) {
  return json{{"t", s.t},
              {"frame_id", s.frame_id},
              {"loss_total", s.loss_total},
              {"loss_instance", s.loss_instance},
              {"loss_image", s.loss_image},
              {"momentum", s.momentum},
              {"pseudo_count", s.pseudo_count},
              {"detections", s.detections},
              {"weak", s.weak}};
}

StepRecord step_from_json(const json& j) {
  StepRecord s;
  s.t = j.at("t").get<std::uint64_t>();
  s.frame_id = j.at("frame_id").get<std::uint64_t>();
  s.loss_total = j.at("loss_total").get<double>();
  s.loss_instance = j.at("loss_instance").get<double>();
  s.loss_image = j.at("loss_image").get<double>();
  s.momentum = j.at("momentum").get<double>();
  s.pseudo_count = j.at("pseudo_count").get<std::size_t>();
  s.detections = j.at("detections").get<std::size_t>();
  s.weak = j.at("weak").get<std::vector<std::size_t>>();
  return s;
}

json to_json(const EvalRecord& e) {
  json ap = json::array();
  for (const auto& a : e.ap50) ap.push_back(a ? json(*a) : json(nullptr));
  return json{{"step", e.step}, {"map50", e.map50}, {"ap50", ap}};
}

EvalRecord eval_from_json(const json& j) {
  EvalRecord e;
  e.step = j.at("step").get<std::uint64_t>();
  e.map50 = j.at("map50").get<double>();
  for (const json& a : j.at("ap50")) e.ap50.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
  return e;
}

void write_ndjson(std::ostream& out, const RunReport& r) {
  json head{{"type", "config"}, {"config", to_json(r.config)}, {"model_digest", r.model_digest}, {"categories", r.categories}};
  out << head.dump() << '\n';
  // interleave by step so the file reads in execution order
  std::size_t e = 0;
  auto flush_evals = [&](std::uint64_t upto) {
    while (e < r.evals.size() && r.evals[e].step <= upto) {
      json j = to_json(r.evals[e++]);
      j["type"] = "eval";
      out << j.dump() << '\n';
    }
  };
  flush_evals(0);
  for (const StepRecord& s : r.steps) {
    json j = to_json(s);
    j["type"] = "step";
    out << j.dump() << '\n';
    flush_evals(s.t + 1);
  }
  flush_evals(~std::uint64_t{0});
  json tail{{"type", "summary"}, {"wall_seconds", r.wall_seconds}, {"steps", r.steps.size()}};
  const auto fm = r.final_map50();
  tail["final_map50"] = fm ? json(*fm) : json(nullptr);
  out << tail.dump() << '\n';
}

RunReport read_ndjson(std::istream& in) {
  RunReport r;
  std::string line;
  std::size_t lineno = 0;
  bool saw_config = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const std::string type = j.at("type").get<std::string>();
      if (type == "config") {
        r.config = config_from_json(j.at("config"));
        r.model_digest = j.at("model_digest").get<std::string>();
        r.categories = j.at("categories").get<std::vector<std::string>>();
        saw_config = true;
      } else if (type == "step") {
        r.steps.push_back(step_from_json(j));
      } else if (type == "eval") {
        r.evals.push_back(eval_from_json(j));
      } else if (type == "summary") {
        r.wall_seconds = j.at("wall_seconds").get<double>();
      } else {
        throw std::runtime_error("unknown record type '" + type + "'");
      }
    } catch (const std::exception& ex) {
      throw std::runtime_error("report line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  if (!saw_config) throw std::runtime_error("report has no config record");
  return r;
}

void write_csv(std::ostream& out, const RunReport& r) {
  out << "step,frame_id,loss_total,loss_instance,loss_image,momentum,pseudo_count,detections,map50\n";
  out << std::setprecision(17);
  std::size_t e = 0;
  for (const StepRecord& s : r.steps) {
    out << s.t << ',' << s.frame_id << ',' << s.loss_total << ',' << s.loss_instance << ',' << s.loss_image << ','
        << s.momentum << ',' << s.pseudo_count << ',' << s.detections << ',';
    while (e < r.evals.size() && r.evals[e].step < s.t + 1) ++e;
    if (e < r.evals.size() && r.evals[e].step == s.t + 1) out << r.evals[e].map50;
    out << '\n';
  }
}

void save_report(const RunReport& report, const std::string& path) {
  const std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream nd(path);
  if (!nd) throw std::runtime_error("cannot write " + path);
  write_ndjson(nd, report);
  std::filesystem::path csv(path);
  csv.replace_extension(".csv");
  std::ofstream c(csv);
  if (!c) throw std::runtime_error("cannot write " + csv.string());
  write_csv(c, report);
  if (!nd || !c) throw std::runtime_error("write failed for " + path);
}

RunReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return read_ndjson(in);
}

}  // namespace wstta::run
