#pragma once

#include <functional>
#include <string>
#include <vector>

#include "wstta/run/stream_run.hpp"

namespace wstta::run {

enum class SweepAxis { noise, omega, order };

const char* axis_name(SweepAxis a);
SweepAxis parse_axis(const std::string& name);

struct SweepSpec {
  SweepAxis axis = SweepAxis::noise;
  std::vector<double> values;  // ignored for order
  std::size_t repeats = 1;
  std::uint64_t seed_base = 0;  // repeat r runs with seed seed_base + r
  RunConfig base;
  unsigned jobs = 1;
};

struct SweepRun {
  double value = 0.0;
  std::size_t repeat = 0;
  RunReport report;
};

struct SweepRow {
  double value = 0.0;
  std::size_t runs = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single run
  double median = 0.0;
};

struct SweepResult {
  SweepSpec spec;
  std::vector<SweepRun> runs;  // value-major, then repeat
  std::vector<SweepRow> rows;
};

double median(std::vector<double> v);
double sample_stddev(const std::vector<double>& v);

/// Runs every (value, repeat) pair, up to `jobs` at a time. Output order
/// does not depend on scheduling.
SweepResult run_sweep(const detector::DetectorModel& model, const SweepSpec& spec,
                      const std::function<void(const SweepRun&)>& on_run = {});

/// sweep.csv: one row per value. runs.ndjson: one record per run with its
/// final mAP, mAP checkpoints and m_t trajectory.
void write_sweep(const std::string& dir, const SweepResult& result);

}  // namespace wstta::run
