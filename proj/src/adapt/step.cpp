#include "wstta/adapt/step.hpp"

#include <cmath>

#include "wstta/adapt/losses.hpp"
#include "wstta/nn/ops.hpp"
#include "wstta/util/rng.hpp"

namespace wstta::adapt {

const char* method_name(Method m) {
  switch (m) {
    case Method::source: return "source";
    case Method::bn_stats: return "bn-stats";
    case Method::dua: return "dua";
    case Method::wstta: return "wstta";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::source, Method::bn_stats, Method::dua, Method::wstta}) {
    if (name == method_name(m)) return m;
  }
  throw nn::UsageError("unknown method '" + name + "'");
}

void AdaptationConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& rule) {
    throw nn::UsageError(field + " " + rule);
  };
  if (!(omega > 0.0 && omega <= 1.0)) bad("omega", "must lie in (0,1]");
  if (!(delta >= 0.0 && std::isfinite(delta))) bad("delta", "must be a finite non-negative number");
  if (!(lambda >= 0.0 && std::isfinite(lambda))) bad("lambda", "must be a finite non-negative number");
  if (!(alpha >= 0.0 && std::isfinite(alpha))) bad("alpha", "must be a finite non-negative number");
  if (!(tau >= 0.0 && tau <= 1.0)) bad("tau", "must lie in [0,1]");
}

double decay_momentum(double m, double omega, double delta) {
  if (!(m >= 0.0 && m <= 1.0)) throw nn::UsageError("momentum must lie in [0,1]");
  return std::min(1.0, m * omega + delta);
}

void update_bn_stats(detector::DetectorModel& model, const std::vector<detector::BnBatchStats>& stats, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw nn::UsageError("momentum must lie in [0,1]");
  if (stats.size() != model.backbone.size()) throw nn::DimensionError("layers", "one statistics entry per BN layer required");
  for (std::size_t l = 0; l < stats.size(); ++l) nn::update_running_stats(model.backbone[l].bn, stats[l].mean, stats[l].var, m);
}

void update_bn_affine(detector::DetectorModel& model, const nn::Gradients& grads, double lambda) {
  std::size_t used = 0;
  for (detector::SlotRef& slot : model.slots()) {
    auto it = grads.find(slot.name);
    if (it == grads.end()) continue;
    if (slot.kind != detector::SlotKind::bn_gamma && slot.kind != detector::SlotKind::bn_beta)
      throw nn::UsageError("gradient for non-affine slot " + slot.name);
    if (it->second.shape() != slot.tensor->shape()) throw nn::DimensionError("channels", "gradient shape mismatch for " + slot.name);
    for (std::size_t i = 0; i < it->second.size(); ++i) (*slot.tensor)[i] -= lambda * it->second[i];
    ++used;
  }
  if (used != grads.size()) throw nn::UsageError("gradient for unknown slot");
}

WsttaLoss wstta_loss(detector::TracedOutputs& traced, const PseudoLabel& pseudo, const WeakLabel& weak, double alpha,
                     Rng& rng) {
  nn::Tape& tape = traced.graph->tape();
  const std::size_t l = traced.graph->model().num_classes();
  const InstanceLoss ins = instance_level_loss(tape, traced.anchor_objectness, traced.class_logits,
                                               traced.graph->anchors(), traced.raw.proposal_boxes, pseudo, rng);
  WsttaLoss out;
  out.total = ins.total;
  out.instance = tape.value(ins.total).item();
  if (!traced.raw.proposal_boxes.empty()) {
    nn::Var zhat = image_level_prediction(tape, nn::slice_cols(tape, traced.class_logits, 0, l), traced.proposal_objectness);
    nn::Var img = image_level_loss(tape, zhat, multi_hot(weak, l));
    out.image = tape.value(img).item();
    out.total = nn::add(tape, out.total, nn::scale(tape, img, alpha));
  }
  out.total_value = tape.value(out.total).item();
  return out;
}

StepReport adapt_step(detector::DetectorModel& model, AdaptationState& state, const nn::Tensor& image,
                      const std::optional<WeakLabel>& weak) {
  const AdaptationConfig& cfg = state.config;
  if (cfg.method == Method::wstta && !weak) throw nn::UsageError("wstta needs a weak label for every frame");
  if (weak) weak->validate(model.num_classes());

  StepReport report;
  report.t = state.t;
  report.weak = weak;
  report.prediction = detector::predict(model, image);

  switch (cfg.method) {
    case Method::source:
      break;
    case Method::bn_stats: {
      const detector::TracedOutputs traced = detector::trace_forward(model, image, nn::BnMode::adapt, detector::Trainable::none);
      report.momentum_used = kInitialMomentum;
      update_bn_stats(model, traced.bn_stats, kInitialMomentum);
      break;
    }
    case Method::dua: {
      const detector::TracedOutputs traced = detector::trace_forward(model, image, nn::BnMode::adapt, detector::Trainable::none);
      state.m = decay_momentum(state.m, cfg.omega, cfg.delta);
      report.momentum_used = state.m;
      update_bn_stats(model, traced.bn_stats, state.m);
      break;
    }
    case Method::wstta: {
      const PseudoLabel pseudo = make_pseudo_label(report.prediction, *weak, cfg.tau);
      report.pseudo_count = pseudo.size();
      detector::TracedOutputs traced = detector::trace_forward(model, image, nn::BnMode::adapt, detector::Trainable::bn_affine);
      Rng rng(derive_key({cfg.seed, state.t, 0x696e7374ULL}));
      const WsttaLoss loss = wstta_loss(traced, pseudo, *weak, cfg.alpha, rng);
      report.loss_instance = loss.instance;
      report.loss_image = loss.image;
      report.loss_total = loss.total_value;
      nn::Tape& tape = traced.graph->tape();
      if (!std::isfinite(report.loss_total)) {
        throw NonFiniteLoss("non-finite adaptation loss at step " + std::to_string(state.t) + " (instance " +
                            std::to_string(report.loss_instance) + ", image " + std::to_string(report.loss_image) + ")");
      }
      const nn::Gradients grads = tape.backward(loss.total);
      const detector::DetectorModel before = model;
      try {
        const double m = decay_momentum(state.m, cfg.omega, cfg.delta);
        update_bn_stats(model, traced.bn_stats, m);
        update_bn_affine(model, grads, cfg.lambda);
        for (detector::SlotRef& slot : model.slots()) {
          if (!slot.tensor->all_finite()) throw NonFiniteLoss("non-finite parameter " + slot.name + " after step " + std::to_string(state.t));
        }
        state.m = m;
        report.momentum_used = m;
      } catch (...) {
        model = before;
        throw;
      }
      break;
    }
  }
  ++state.t;
  return report;
}

}  // namespace wstta::adapt
