#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "wstta/adapt/labels.hpp"
#include "wstta/detector/model.hpp"
#include "wstta/detector/network.hpp"
#include "wstta/nn/tape.hpp"
#include "wstta/util/rng.hpp"

namespace wstta::adapt {

enum class Method { source, bn_stats, dua, wstta };

const char* method_name(Method m);
Method parse_method(const std::string& name);

inline constexpr double kInitialMomentum = 0.1;

struct AdaptationConfig {
  Method method = Method::wstta;
  double omega = 0.99;
  double delta = 0.005;
  double lambda = 1e-4;
  double alpha = 0.1;
  double tau = 0.8;
  std::uint64_t seed = 0;  // anchor sampling

  /// Throws UsageError naming the offending field.
  void validate() const;
};

struct AdaptationState {
  std::uint64_t t = 0;
  double m = kInitialMomentum;
  AdaptationConfig config;

  explicit AdaptationState(AdaptationConfig c = {}) : config(c) { config.validate(); }
};

struct StepReport {
  std::uint64_t t = 0;  // step index this report belongs to
  double loss_total = 0.0;
  double loss_instance = 0.0;
  double loss_image = 0.0;
  double momentum_used = 0.0;
  std::size_t pseudo_count = 0;
  detector::Prediction prediction;
  std::optional<WeakLabel> weak;
};

/// m*omega + delta, capped at 1.
double decay_momentum(double m, double omega, double delta);

/// Moves every BN layer's running statistics toward the given batch stats.
void update_bn_stats(detector::DetectorModel& model, const std::vector<detector::BnBatchStats>& stats, double m);

/// gamma -= lambda * dL/dgamma, beta -= lambda * dL/dbeta. Gradients for any
/// other slot are rejected.
void update_bn_affine(detector::DetectorModel& model, const nn::Gradients& grads, double lambda);

struct WsttaLoss {
  nn::Var total;  // instance + alpha * image
  double total_value = 0.0;
  double instance = 0.0;
  double image = 0.0;
};

/// Builds the full adaptation loss on the traced forward's tape.
WsttaLoss wstta_loss(detector::TracedOutputs& traced, const PseudoLabel& pseudo, const WeakLabel& weak, double alpha,
                     Rng& rng);

/// Raised when a step's loss is not finite; the model is already restored.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scores the frame with the current model, then adapts it according to
/// state.config.method. image: [3,S,S] or [1,3,S,S].
StepReport adapt_step(detector::DetectorModel& model, AdaptationState& state, const nn::Tensor& image,
                      const std::optional<WeakLabel>& weak);

}  // namespace wstta::adapt
