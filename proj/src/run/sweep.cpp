#include "wstta/run/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <thread>

namespace wstta::run {

const char* axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::noise: return "noise";
    case SweepAxis::omega: return "omega";
    case SweepAxis::order: return "order";
  }
  return "?";
}

SweepAxis parse_axis(const std::string& name) {
  for (SweepAxis a : {SweepAxis::noise, SweepAxis::omega, SweepAxis::order}) {
    if (name == axis_name(a)) return a;
  }
  throw nn::UsageError("unknown sweep axis '" + name + "' (expected noise, omega or order)");
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double sample_stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

SweepResult run_sweep(const detector::DetectorModel& model, const SweepSpec& spec,
                      const std::function<void(const SweepRun&)>& on_run) {
  if (spec.repeats == 0) throw nn::UsageError("repeats must be positive");
  std::vector<double> values = spec.values;
  if (spec.axis == SweepAxis::order) values = {0.0};
  if (values.empty()) throw nn::UsageError("sweep needs at least one value");

  SweepResult result;
  result.spec = spec;
  std::vector<RunConfig> configs;
  for (double v : values) {
    for (std::size_t r = 0; r < spec.repeats; ++r) {
      RunConfig c = spec.base;
      c.seed = spec.seed_base + r;
      if (spec.axis == SweepAxis::noise) c.noise = v;
      if (spec.axis == SweepAxis::omega) c.omega = v;
      c.validate();
      configs.push_back(c);
      result.runs.push_back({v, r, {}});
    }
  }

  const TestSet tests = make_test_set(spec.base.dataset(), spec.base.test_frames);
  std::atomic<std::size_t> next{0};
  std::mutex mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        RunReport rep = run_stream(model, configs[i], tests);
        std::lock_guard lock(mutex);
        result.runs[i].report = std::move(rep);
        if (on_run) on_run(result.runs[i]);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
        next = configs.size();
      }
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(spec.jobs, static_cast<unsigned>(configs.size())));
  std::vector<std::thread> pool;
  for (unsigned j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    std::vector<double> maps;
    for (std::size_t r = 0; r < spec.repeats; ++r) maps.push_back(result.runs[vi * spec.repeats + r].report.final_map50().value_or(0.0));
    double mean = 0.0;
    for (double m : maps) mean += m;
    mean /= static_cast<double>(maps.size());
    result.rows.push_back({values[vi], maps.size(), mean, sample_stddev(maps), median(maps)});
  }
  return result;
}

void write_sweep(const std::string& dir, const SweepResult& result) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const char* axis = axis_name(result.spec.axis);
  std::ofstream csv(fs::path(dir) / "sweep.csv");
  csv << std::setprecision(17) << "vary,value,runs,mean_map50,std_map50,median_map50\n";
  for (const SweepRow& r : result.rows)
    csv << axis << ',' << r.value << ',' << r.runs << ',' << r.mean << ',' << r.stddev << ',' << r.median << '\n';
  std::ofstream runs(fs::path(dir) / "runs.ndjson");
  for (const SweepRun& r : result.runs) {
    nlohmann::json maps = nlohmann::json::array();
    for (const EvalRecord& e : r.report.evals) maps.push_back({{"step", e.step}, {"map50", e.map50}});
    const auto fm = r.report.final_map50();
    runs << nlohmann::json{{"vary", axis},
                           {"value", r.value},
                           {"repeat", r.repeat},
                           {"seed", r.report.config.seed},
                           {"final_map50", fm ? nlohmann::json(*fm) : nlohmann::json(nullptr)},
                           {"map50", maps},
                           {"momentum", r.report.momentum_trajectory()}}
                .dump()
         << '\n';
  }
  if (!csv || !runs) throw std::runtime_error("cannot write sweep output in " + dir);
}

}  // namespace wstta::run
