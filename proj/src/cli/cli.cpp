#include "wstta/cli/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "wstta/detector/checkpoint.hpp"
#include "wstta/detector/network.hpp"
#include "wstta/detector/pretrain.hpp"
#include "wstta/eval/metrics.hpp"
#include "wstta/run/stream_run.hpp"
#include "wstta/run/sweep.hpp"
#include "wstta/server/http.hpp"
#include "wstta/sim/dataset_io.hpp"

namespace wstta::cli {

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted = true; }

struct RunFlags {
  std::string config_file;
  std::optional<std::string> method;
  std::optional<std::size_t> frames, eval_every, test_frames;
  std::optional<double> omega, delta, lambda, alpha, tau, noise;
  std::optional<std::uint64_t> seed, data_seed;

  void attach(CLI::App* app, bool with_seed) {
    app->add_option("--config", config_file, "JSON file with run settings; flags override it");
    app->add_option("--method", method, "source, bn-stats, dua, wstta or oracle-ft");
    app->add_option("--frames", frames, "target frames to stream (default 100)");
    app->add_option("--omega", omega, "momentum decay factor (default 0.99)");
    app->add_option("--delta", delta, "momentum floor term (default 0.005)");
    app->add_option("--lambda", lambda, "gamma/beta step size (default 0.0001)");
    app->add_option("--alpha", alpha, "image-level loss weight (default 0.1)");
    app->add_option("--tau", tau, "pseudo-label score threshold (default 0.8)");
    app->add_option("--noise", noise, "weak-label bit flip probability (default 0)");
    if (with_seed) app->add_option("--seed", seed, "stream order / sampling seed (default 0)");
    app->add_option("--eval-every", eval_every, "evaluate every N steps, 0 = only at the end (default 10)");
    app->add_option("--test-frames", test_frames, "target-test frames used for mAP (default 500)");
    app->add_option("--data-seed", data_seed, "scene generator seed (default 7)");
  }

  run::RunConfig resolve() const {
    run::RunConfig c;
    if (!config_file.empty()) {
      std::ifstream f(config_file);
      if (!f) throw std::runtime_error("cannot read " + config_file);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(f);
      } catch (const nlohmann::json::parse_error& e) {
        throw nn::UsageError(config_file + ": " + e.what());
      }
      c = run::config_from_json(j);
    }
    if (method) c.method = run::parse_run_method(*method);
    if (frames) c.frames = *frames;
    if (omega) c.omega = *omega;
    if (delta) c.delta = *delta;
    if (lambda) c.lambda = *lambda;
    if (alpha) c.alpha = *alpha;
    if (tau) c.tau = *tau;
    if (noise) c.noise = *noise;
    if (seed) c.seed = *seed;
    if (eval_every) c.eval_every = *eval_every;
    if (test_frames) c.test_frames = *test_frames;
    if (data_seed) c.data_seed = *data_seed;
    c.validate();
    return c;
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string ap_list(const run::EvalRecord& e, const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t c = 0; c < e.ap50.size(); ++c) {
    if (!out.empty()) out += ' ';
    out += names.at(c) + '=' + (e.ap50[c] ? fmt(*e.ap50[c]) : std::string("n/a"));
  }
  return out;
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw nn::UsageError("not a number in --values: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

int cmd_pretrain(std::ostream& out, const std::string& path, std::size_t steps, std::uint64_t seed,
                 std::uint64_t data_seed, const std::string& curve_path) {
  sim::DatasetSpec spec;
  spec.seed = data_seed;
  std::vector<detector::TrainingSample> data;
  for (sim::Frame& f : sim::make_split(spec, sim::Split::source_train, spec.source_train)) {
    data.push_back({std::move(f.image), std::move(f.objects)});
  }
  detector::PretrainConfig pc;
  pc.steps = steps;
  pc.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  const detector::DetectorModel init = detector::build_model(seed, sim::category_names(), detector::Architecture::reference());
  const detector::PretrainResult r = detector::pretrain(init, data, pc, [&](std::size_t step, double loss) {
    if ((step + 1) % 250 == 0) out << "step " << step + 1 << "/" << steps << " loss " << fmt(loss) << std::endl;
  });
  detector::save_checkpoint(r.model, path);
  const std::string curve = curve_path.empty() ? path + ".loss.csv" : curve_path;
  std::ofstream c(curve);
  c << std::setprecision(17) << "step,loss\n";
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) c << i << ',' << r.loss_curve[i] << '\n';
  if (!c) throw std::runtime_error("cannot write " + curve);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out << "wrote " << path << " and " << curve << " (" << fmt(secs, 1) << " s)" << std::endl;
  return kSuccess;
}

int cmd_adapt(std::ostream& out, const std::string& model_path, const run::RunConfig& config,
              const std::string& report_path) {
  const detector::DetectorModel model = detector::load_checkpoint(model_path);
  const run::RunReport rep = run::run_stream(model, config, nullptr, [&](const run::StepRecord&, const std::optional<run::EvalRecord>& e) {
    if (e) out << "step " << e->step << " map50 " << fmt(e->map50) << std::endl;
  });
  if (!report_path.empty()) run::save_report(rep, report_path);
  const auto fm = rep.final_map50();
  out << "method " << run::run_method_name(config.method) << " frames " << rep.steps.size() << " final map50 "
      << (fm ? fmt(*fm) : std::string("n/a")) << " (" << ap_list(rep.evals.back(), rep.categories) << ")" << std::endl;
  return kSuccess;
}

int cmd_sweep(std::ostream& out, const std::string& model_path, run::SweepSpec spec, const std::string& out_dir) {
  const detector::DetectorModel model = detector::load_checkpoint(model_path);
  const run::SweepResult r = run::run_sweep(model, spec, [&](const run::SweepRun& s) {
    out << run::axis_name(spec.axis) << "=" << s.value << " repeat " << s.repeat << " map50 "
        << fmt(s.report.final_map50().value_or(0.0)) << std::endl;
  });
  if (!out_dir.empty()) run::write_sweep(out_dir, r);
  out << std::left << std::setw(10) << run::axis_name(spec.axis) << std::setw(6) << "runs" << std::setw(10) << "mean"
      << std::setw(10) << "std" << "median" << '\n';
  for (const run::SweepRow& row : r.rows) {
    out << std::setw(10) << row.value << std::setw(6) << row.runs << std::setw(10) << fmt(row.mean) << std::setw(10)
        << fmt(row.stddev) << fmt(row.median) << '\n';
  }
  out.flush();
  return kSuccess;
}

int cmd_eval(std::ostream& out, const std::string& model_path, const std::string& split_name,
             std::optional<std::size_t> count, std::uint64_t data_seed, std::optional<double> require) {
  const detector::DetectorModel model = detector::load_checkpoint(model_path);
  sim::DatasetSpec spec;
  spec.seed = data_seed;
  const sim::Split split = sim::parse_split(split_name);
  const std::size_t n = count.value_or(spec.split_size(split));
  if (n == 0 || n > spec.split_size(split)) throw nn::UsageError("--count must lie in [1, " + std::to_string(spec.split_size(split)) + "]");
  std::vector<eval::FrameResult> results;
  for (std::size_t i = 0; i < n; ++i) {
    const sim::Frame f = sim::make_frame(spec, split, i);
    results.push_back({f.frame_id, detector::predict(model, f.image), f.objects});
  }
  const eval::EvalResult r = eval::map50(results, model.num_classes());
  out << "split " << split_name << " frames " << n << '\n';
  for (std::size_t c = 0; c < r.per_category.size(); ++c) {
    const eval::CategoryResult& cr = r.per_category[c];
    out << "  " << std::left << std::setw(10) << model.categories[c] << " ap50 "
        << (cr.ap50 ? fmt(*cr.ap50) : std::string("n/a")) << "  gt " << cr.num_gt << " tp " << cr.tp << " fp " << cr.fp
        << " fn " << cr.fn << '\n';
  }
  out << "map50 " << fmt(r.map50) << std::endl;
  if (require && r.map50 < *require) {
    out << "gate failed: map50 " << fmt(r.map50) << " < " << fmt(*require) << std::endl;
    return kGateFailed;
  }
  return kSuccess;
}

int cmd_render(std::ostream& out, const std::string& dir, const std::string& domain, std::optional<std::string> split_name,
               std::size_t count, std::uint64_t seed) {
  sim::DatasetSpec spec;
  spec.seed = seed;
  sim::Split split;
  if (split_name) {
    split = sim::parse_split(*split_name);
  } else if (domain == "source") {
    split = sim::Split::source_train;
  } else if (domain == "target") {
    split = sim::Split::target_stream;
  } else {
    throw nn::UsageError("--domain must be source or target");
  }
  if (count > spec.split_size(split)) throw nn::UsageError("--count exceeds the split size " + std::to_string(spec.split_size(split)));
  sim::export_frames(dir, sim::make_split(spec, split, count), sim::category_names());
  out << "wrote " << count << " frames of " << sim::split_name(split) << " to " << dir << std::endl;
  return kSuccess;
}

int cmd_serve(std::ostream& out, const std::string& model_path, const std::string& config_file, std::string host,
              int port, std::string state_dir) {
  server::ServiceOptions opts;
  if (!config_file.empty()) {
    std::ifstream f(config_file);
    if (!f) throw std::runtime_error("cannot read " + config_file);
    const nlohmann::json j = nlohmann::json::parse(f);
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() == "state_dir") state_dir = it->get<std::string>();
      else if (it.key() == "checkpoint_every") opts.checkpoint_every = it->get<std::size_t>();
      else if (it.key() == "host") host = it->get<std::string>();
      else if (it.key() == "port") port = it->get<int>();
      else throw nn::UsageError("unknown server config field '" + it.key() + "'");
    }
  }
  opts.state_dir = state_dir;
  server::SessionService service(detector::load_checkpoint(model_path), opts);
  server::HttpServer http(service);
  const int bound = http.bind(host, port);
  if (bound < 0) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  out << "listening on http://" << host << ":" << bound << std::endl;

  g_interrupted = false;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::thread watcher([&] {
    while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    http.stop();
  });
  const bool ok = http.serve();
  g_interrupted = true;
  watcher.join();
  return ok ? kSuccess : kRuntime;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weakly supervised test-time adaptation for a small two-stage detector"};
  app.require_subcommand(1);

  std::string model_path, report_path, out_path, curve_path, out_dir, split_name = "target-test", domain = "target";
  std::size_t steps = detector::PretrainConfig{}.steps, count = 16, repeats = 1;
  std::uint64_t seed = 1, data_seed = 7, seed_base = 0;
  std::optional<std::size_t> eval_count;
  std::optional<double> require_map;
  std::optional<std::string> render_split;
  std::string vary, values, host = "127.0.0.1", state_dir = "wstta-state", serve_config;
  unsigned jobs = 1;
  int port = 8080;

  CLI::App* pre = app.add_subcommand("pretrain", "train the detector on the source domain");
  pre->add_option("--out", out_path, "checkpoint path")->required();
  pre->add_option("--steps", steps, "optimiser steps (default 2500)");
  pre->add_option("--seed", seed, "initialisation / sampling seed (default 1)");
  pre->add_option("--data-seed", data_seed, "scene generator seed (default 7)");
  pre->add_option("--curve", curve_path, "loss curve CSV (default <out>.loss.csv)");

  RunFlags adapt_flags;
  CLI::App* ad = app.add_subcommand("adapt", "stream target frames through one adaptation method");
  ad->add_option("--model", model_path, "pretrained checkpoint")->required();
  ad->add_option("--report", report_path, "NDJSON report path; a CSV is written next to it");
  adapt_flags.attach(ad, true);

  RunFlags sweep_flags;
  CLI::App* sw = app.add_subcommand("sweep", "repeat adaptation runs over noise, omega or stream order");
  sw->add_option("--model", model_path, "pretrained checkpoint")->required();
  sw->add_option("--vary", vary, "noise, omega or order")->required();
  sw->add_option("--values", values, "comma-separated values (not used for order)");
  sw->add_option("--repeats", repeats, "runs per value; repeat r uses seed seed-base + r (default 1)");
  sw->add_option("--seed-base", seed_base, "first seed (default 0)");
  sw->add_option("--jobs", jobs, "parallel worker threads (default 1)");
  sw->add_option("--out", out_dir, "directory for sweep.csv and runs.ndjson");
  sweep_flags.attach(sw, false);

  CLI::App* ev = app.add_subcommand("eval", "mAP of a checkpoint on one split");
  ev->add_option("--model", model_path, "checkpoint")->required();
  ev->add_option("--split", split_name, "source-train, source-test, target-stream or target-test (default target-test)");
  ev->add_option("--count", eval_count, "frames to evaluate (default: whole split)");
  ev->add_option("--data-seed", data_seed, "scene generator seed (default 7)");
  ev->add_option("--require-map", require_map, "exit with status 3 when mAP is below this value");

  CLI::App* re = app.add_subcommand("render", "export frames as PNG plus annotations.ndjson");
  re->add_option("--out-dir", out_dir, "output directory")->required();
  re->add_option("--domain", domain, "source or target (default target)");
  re->add_option("--split", render_split, "explicit split, overrides --domain");
  re->add_option("--count", count, "frames to write (default 16)");
  re->add_option("--seed", data_seed, "scene generator seed (default 7)");

  CLI::App* se = app.add_subcommand("serve", "run the streaming session server");
  se->add_option("--model", model_path, "checkpoint sessions start from")->required();
  se->add_option("--port", port, "TCP port, 0 picks a free one (default 8080)");
  se->add_option("--host", host, "bind address (default 127.0.0.1)");
  se->add_option("--state-dir", state_dir, "event logs and checkpoints (default ./wstta-state)");
  se->add_option("--config", serve_config, "JSON file with state_dir, checkpoint_every, host, port");

  std::vector<std::string> argv_store{"wstta"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsage;
  }

  try {
    if (*pre) return cmd_pretrain(out, out_path, steps, seed, data_seed, curve_path);
    if (*ad) return cmd_adapt(out, model_path, adapt_flags.resolve(), report_path);
    if (*sw) {
      run::SweepSpec spec;
      spec.axis = run::parse_axis(vary);
      spec.values = parse_values(values);
      if (spec.axis != run::SweepAxis::order && spec.values.empty()) throw nn::UsageError("--values must list at least one value");
      spec.repeats = repeats;
      spec.seed_base = seed_base;
      spec.jobs = jobs;
      spec.base = sweep_flags.resolve();
      return cmd_sweep(out, model_path, spec, out_dir);
    }
    if (*ev) return cmd_eval(out, model_path, split_name, eval_count, data_seed, require_map);
    if (*re) return cmd_render(out, out_dir, domain, render_split, count, data_seed);
    if (*se) return cmd_serve(out, model_path, serve_config, host, port, state_dir);
  } catch (const nn::UsageError& e) {
    err << "error: " << e.what() << std::endl;
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << std::endl;
    return kRuntime;
  }
  return kUsage;
}

}  // namespace wstta::cli
