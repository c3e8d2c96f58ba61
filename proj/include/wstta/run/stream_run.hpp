#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "wstta/adapt/step.hpp"
#include "wstta/detector/model.hpp"
#include "wstta/run/report.hpp"
#include "wstta/sim/scene.hpp"

namespace wstta::run {

using TestSet = std::shared_ptr<const std::vector<sim::Frame>>;

/// First `count` frames of the target-test split.
TestSet make_test_set(const sim::DatasetSpec& spec, std::size_t count);

/// Seeded permutation of the target-stream indices.
std::vector<std::size_t> stream_order(std::uint64_t seed, std::size_t stream_length);

/// Offline supervised fine-tune of every parameter on the labelled
/// target-stream split; the Oracle upper-bound analog.
detector::DetectorModel oracle_finetune(const detector::DetectorModel& model, const RunConfig& config);

/// One adaptation run over the target stream. Both the CLI and the server
/// drive this class, so a session and a batch run with the same inputs
/// produce the same report.
class StreamRun {
 public:
  StreamRun(detector::DetectorModel model, RunConfig config, TestSet test_set = nullptr);

  const RunConfig& config() const noexcept { return config_; }
  const RunReport& report() const noexcept { return report_; }
  const detector::DetectorModel& model() const noexcept { return model_; }
  const adapt::AdaptationState& state() const noexcept { return state_; }

  std::size_t position() const noexcept { return report_.steps.size(); }
  bool done() const noexcept { return position() >= config_.frames; }

  /// Renders the frame at the current stream position.
  sim::Frame current_frame() const;

  /// Oracle weak label for the current position, with label noise applied.
  adapt::WeakLabel oracle_label(const sim::Frame& frame) const;

  /// Adapts on the current frame and advances. Returns the new step record
  /// and, when the cadence says so, the evaluation that followed.
  std::pair<StepRecord, std::optional<EvalRecord>> step(const sim::Frame& frame, const adapt::WeakLabel& weak);

  /// mAP on the held-out target-test frames; never mutates the model.
  EvalRecord evaluate() const;

  void set_wall_seconds(double s) { report_.wall_seconds = s; }

 private:
  detector::DetectorModel model_;
  RunConfig config_;
  adapt::AdaptationState state_;
  TestSet test_set_;
  std::vector<std::size_t> order_;
  RunReport report_;
};

using StepCallback = std::function<void(const StepRecord&, const std::optional<EvalRecord>&)>;

/// Runs a whole stream with oracle labels.
RunReport run_stream(const detector::DetectorModel& model, const RunConfig& config, TestSet test_set = nullptr,
                     const StepCallback& on_step = {});

}  // namespace wstta::run
