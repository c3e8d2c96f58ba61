#include "wstta/adapt/losses.hpp"

#include <algorithm>

#include "wstta/detector/anchors.hpp"
#include "wstta/nn/ops.hpp"

namespace wstta::adapt {

using nn::Shape;
using nn::Tensor;
using nn::Var;

std::vector<std::size_t> row_argmax(const Tensor& class_scores) {
  if (class_scores.rank() != 2) throw nn::DimensionError("rank", "class scores must be a matrix");
  const std::size_t k = class_scores.dim(0), l = class_scores.dim(1);
  std::vector<std::size_t> out(k, 0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 1; c < l; ++c) {
      if (class_scores.at(r, c) > class_scores.at(r, out[r])) out[r] = c;
    }
  return out;
}

Tensor build_O(const Tensor& class_scores, std::span<const double> objectness) {
  const std::vector<std::size_t> arg = row_argmax(class_scores);
  if (objectness.size() != arg.size()) throw nn::DimensionError("proposals", "one objectness value per row required");
  Tensor o(Shape{class_scores.dim(0), class_scores.dim(1)});
  for (std::size_t k = 0; k < arg.size(); ++k) o.at(k, arg[k]) = objectness[k];
  return o;
}

Var image_level_prediction(nn::Tape& tape, Var class_scores, Var objectness) {
  const Tensor& c = tape.value(class_scores);
  const Tensor& o = tape.value(objectness);
  if (c.rank() != 2 || c.dim(0) == 0) throw nn::DimensionError("proposals", "need at least one proposal");
  if (o.size() != c.dim(0)) throw nn::DimensionError("proposals", "one objectness value per row required");
  Var big_o = nn::place_in_columns(tape, objectness, row_argmax(c), c.dim(1));
  return nn::sum_rows(tape, nn::mul(tape, nn::softmax_rows(tape, class_scores), nn::softmax_cols(tape, big_o)));
}

std::vector<double> image_level_prediction(const Tensor& class_scores, std::span<const double> objectness) {
  nn::Tape tape;
  Var c = tape.constant(class_scores);
  Var o = tape.constant(Tensor(Shape{objectness.size()}, std::vector<double>(objectness.begin(), objectness.end())));
  const Tensor& z = tape.value(image_level_prediction(tape, c, o));
  return {z.values().begin(), z.values().end()};
}

Var image_level_loss(nn::Tape& tape, Var zhat, std::span<const double> target) {
  if (tape.value(zhat).size() != target.size()) throw nn::DimensionError("categories", "target length differs from prediction");
  return nn::binary_cross_entropy(tape, zhat, {target.begin(), target.end()}, kProbabilityClamp);
}

double image_level_loss(std::span<const double> zhat, std::span<const double> target) {
  nn::Tape tape;
  Var z = tape.constant(Tensor(Shape{zhat.size()}, std::vector<double>(zhat.begin(), zhat.end())));
  return tape.value(image_level_loss(tape, z, target)).item();
}

InstanceLoss instance_level_loss(nn::Tape& tape, Var anchor_objectness, Var class_logits,
                                 std::span<const detector::Box> anchors, std::span<const detector::Box> proposal_boxes,
                                 const PseudoLabel& pseudo, Rng& rng) {
  const Tensor& logits = tape.value(class_logits);
  if (tape.value(anchor_objectness).size() != anchors.size())
    throw nn::DimensionError("anchors", "one objectness logit per anchor required");
  if (logits.rank() != 2 || logits.dim(0) != proposal_boxes.size())
    throw nn::DimensionError("proposals", "one class-logit row per proposal required");
  const int background = static_cast<int>(logits.dim(1)) - 1;

  std::vector<detector::Box> boxes;
  for (const detector::LabeledBox& p : pseudo) boxes.push_back(p.box);
  const std::vector<detector::AnchorMatch> match = detector::assign_anchors(anchors, boxes);
  std::vector<std::size_t> pos, neg;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (match[a].label == detector::AnchorLabel::positive) pos.push_back(a);
    if (match[a].label == detector::AnchorLabel::negative) neg.push_back(a);
  }
  auto shuffle = [&rng](std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  };
  shuffle(pos);
  shuffle(neg);
  pos.resize(std::min(pos.size(), kInstanceAnchorSamples / 2));
  neg.resize(std::min(neg.size(), kInstanceAnchorSamples - pos.size()));

  InstanceLoss out;
  std::vector<double> targets(anchors.size(), 0.0), weights(anchors.size(), 0.0);
  for (std::size_t a : pos) targets[a] = weights[a] = 1.0;
  for (std::size_t a : neg) weights[a] = 1.0;
  out.sampled_anchors = pos;
  out.sampled_anchors.insert(out.sampled_anchors.end(), neg.begin(), neg.end());
  std::sort(out.sampled_anchors.begin(), out.sampled_anchors.end());
  out.rpn = nn::bce_with_logits(tape, anchor_objectness, std::move(targets), std::move(weights));

  out.roi_labels.assign(proposal_boxes.size(), background);
  for (std::size_t r = 0; r < proposal_boxes.size(); ++r) {
    double best = 0.0;
    for (const detector::LabeledBox& p : pseudo) {
      const double v = detector::iou(proposal_boxes[r], p.box);
      if (v > best) {
        best = v;
        out.roi_labels[r] = v >= detector::kPositiveIou ? static_cast<int>(p.category) : background;
      }
    }
  }
  out.roi = nn::softmax_cross_entropy(tape, class_logits, out.roi_labels);
  out.total = nn::add(tape, out.rpn, out.roi);
  return out;
}

}  // namespace wstta::adapt
