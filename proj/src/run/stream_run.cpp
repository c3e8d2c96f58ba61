#include "wstta/run/stream_run.hpp"

#include <chrono>
#include <iomanip>
#include <sstream>

#include "wstta/detector/network.hpp"
#include "wstta/detector/pretrain.hpp"
#include "wstta/eval/metrics.hpp"

namespace wstta::run {

namespace {

std::string model_fingerprint(const detector::DetectorModel& model) {
  std::uint64_t v = 0;
  for (const auto& [name, digest] : detector::parameter_digest(model)) v = mix64(v ^ digest);
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

}  // namespace

TestSet make_test_set(const sim::DatasetSpec& spec, std::size_t count) {
  return std::make_shared<const std::vector<sim::Frame>>(sim::make_split(spec, sim::Split::target_test, count));
}

std::vector<std::size_t> stream_order(std::uint64_t seed, std::size_t stream_length) {
  std::vector<std::size_t> order(stream_length);
  for (std::size_t i = 0; i < stream_length; ++i) order[i] = i;
  Rng rng(derive_key({seed, 0x6f72646572ULL}));
  for (std::size_t i = stream_length; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

detector::DetectorModel oracle_finetune(const detector::DetectorModel& model, const RunConfig& config) {
  const sim::DatasetSpec spec = config.dataset();
  std::vector<detector::TrainingSample> data;
  for (std::size_t i = 0; i < spec.target_stream; ++i) {
    sim::Frame f = sim::make_frame(spec, sim::Split::target_stream, i);
    data.push_back({std::move(f.image), std::move(f.objects)});
  }
  detector::PretrainConfig pc;
  pc.steps = config.oracle_steps;
  pc.learning_rate = 5e-4;
  pc.seed = derive_key({config.seed, 0x6f7261636c65ULL});
  return detector::pretrain(model, data, pc).model;
}

StreamRun::StreamRun(detector::DetectorModel model, RunConfig config, TestSet test_set)
    : model_(std::move(model)), config_(config), state_((config.validate(), config.adaptation())),
      test_set_(std::move(test_set)) {
  if (!test_set_ || test_set_->size() < config_.test_frames) test_set_ = make_test_set(config_.dataset(), config_.test_frames);
  order_ = stream_order(config_.seed, config_.dataset().target_stream);
  report_.config = config_;
  report_.model_digest = model_fingerprint(model_);
  report_.categories = model_.categories;
  if (config_.method == RunMethod::oracle_ft) model_ = oracle_finetune(model_, config_);
  if (config_.eval_every > 0) report_.evals.push_back(evaluate());
}

sim::Frame StreamRun::current_frame() const {
  if (done()) throw nn::UsageError("stream exhausted");
  return sim::make_frame(config_.dataset(), sim::Split::target_stream, order_[position()]);
}

adapt::WeakLabel StreamRun::oracle_label(const sim::Frame& frame) const {
  const std::vector<double> clean = adapt::multi_hot(sim::weak_label_oracle(frame), model_.num_classes());
  if (config_.noise == 0.0) return adapt::from_multi_hot(clean);
  Rng rng(derive_key({config_.seed, position(), 0x6e6f697365ULL}));
  return adapt::from_multi_hot(sim::inject_label_noise(clean, config_.noise, rng));
}

std::pair<StepRecord, std::optional<EvalRecord>> StreamRun::step(const sim::Frame& frame, const adapt::WeakLabel& weak) {
  if (done()) throw nn::UsageError("stream exhausted");
  const adapt::StepReport r = adapt::adapt_step(model_, state_, frame.image, weak);
  StepRecord s;
  s.t = r.t;
  s.frame_id = frame.frame_id;
  s.loss_total = r.loss_total;
  s.loss_instance = r.loss_instance;
  s.loss_image = r.loss_image;
  s.momentum = r.momentum_used;
  s.pseudo_count = r.pseudo_count;
  s.detections = r.prediction.size();
  s.weak = weak.categories();
  report_.steps.push_back(s);

  std::optional<EvalRecord> e;
  const std::size_t n = position();
  if (done() || (config_.eval_every > 0 && n % config_.eval_every == 0)) {
    e = evaluate();
    report_.evals.push_back(*e);
  }
  return {s, e};
}

EvalRecord StreamRun::evaluate() const {
  std::vector<eval::FrameResult> results;
  for (std::size_t i = 0; i < config_.test_frames; ++i) {
    const sim::Frame& f = (*test_set_)[i];
    results.push_back({f.frame_id, detector::predict(model_, f.image), f.objects});
  }
  const eval::EvalResult r = eval::map50(results, model_.num_classes());
  EvalRecord rec;
  rec.step = position();
  rec.map50 = r.map50;
  for (const eval::CategoryResult& c : r.per_category) rec.ap50.push_back(c.ap50);
  return rec;
}

RunReport run_stream(const detector::DetectorModel& model, const RunConfig& config, TestSet test_set,
                     const StepCallback& on_step) {
  const auto start = std::chrono::steady_clock::now();
  StreamRun run(model, config, std::move(test_set));
  while (!run.done()) {
    const sim::Frame f = run.current_frame();
    const auto [s, e] = run.step(f, run.oracle_label(f));
    if (on_step) on_step(s, e);
  }
  if (config.frames == 0) {
    // nothing streamed: still report where the model stands
    RunReport r = run.report();
    if (r.evals.empty()) r.evals.push_back(run.evaluate());
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
  }
  run.set_wall_seconds(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  return run.report();
}

}  // namespace wstta::run
