#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wstta/adapt/step.hpp"
#include "wstta/sim/scene.hpp"

namespace wstta::run {

/// Methods reachable from the CLI: the four adaptation methods plus the
/// offline fully supervised fine-tune.
enum class RunMethod { source, bn_stats, dua, wstta, oracle_ft };

const char* run_method_name(RunMethod m);
RunMethod parse_run_method(const std::string& name);

struct RunConfig {
  RunMethod method = RunMethod::wstta;
  double omega = 0.99;
  double delta = 0.005;
  double lambda = 1e-4;
  double alpha = 0.1;
  double tau = 0.8;
  std::size_t frames = 100;
  double noise = 0.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 10;  // 0: evaluate only after the last frame
  std::size_t test_frames = 500;
  std::uint64_t data_seed = 7;
  std::size_t oracle_steps = 600;  // oracle-ft fine-tuning steps

  adapt::AdaptationConfig adaptation() const;
  sim::DatasetSpec dataset() const;
  void validate() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct StepRecord {
  std::uint64_t t = 0;
  std::uint64_t frame_id = 0;
  double loss_total = 0.0;
  double loss_instance = 0.0;
  double loss_image = 0.0;
  double momentum = 0.0;
  std::size_t pseudo_count = 0;
  std::size_t detections = 0;
  std::vector<std::size_t> weak;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct EvalRecord {
  std::uint64_t step = 0;  // number of adaptation steps taken before evaluating
  double map50 = 0.0;
  std::vector<std::optional<double>> ap50;  // per category

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

struct RunReport {
  RunConfig config;
  std::string model_digest;  // of the model the run started from
  std::vector<std::string> categories;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  double wall_seconds = 0.0;

  std::optional<double> final_map50() const;
  std::vector<double> momentum_trajectory() const;

  /// Everything except wall-clock time.
  bool same_results(const RunReport& other) const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});
nlohmann::json to_json(const StepRecord& s);
StepRecord step_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EvalRecord& e);
EvalRecord eval_from_json(const nlohmann::json& j);

/// One JSON object per line: a "config" record, then "step" and "eval"
/// records in the order they happened, then a "summary" record.
void write_ndjson(std::ostream& out, const RunReport& report);
RunReport read_ndjson(std::istream& in);

/// One row per step; map50 filled on rows where an evaluation followed.
void write_csv(std::ostream& out, const RunReport& report);

void save_report(const RunReport& report, const std::string& ndjson_path);
RunReport load_report(const std::string& ndjson_path);

}  // namespace wstta::run
