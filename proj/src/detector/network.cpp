#include "wstta/detector/network.hpp"

#include <algorithm>
#include <cmath>

#include "wstta/detector/anchors.hpp"
#include "wstta/nn/ops.hpp"

namespace wstta::detector {

using nn::Shape;
using nn::Tensor;
using nn::Var;

namespace {

constexpr double kMinProposalSide = 1.0;

}  // namespace

DetectorGraph::DetectorGraph(const DetectorModel& model, nn::BnMode mode, Trainable trainable)
    : model_(model), mode_(mode) {
  const Architecture& a = model.arch;
  anchors_ = make_anchors(a.grid(), static_cast<double>(a.stride()), a.anchor_sizes);
  for (std::size_t i = 0; i < model.backbone.size(); ++i) {
    const std::string p = "backbone." + std::to_string(i) + ".";
    const StageParams& s = model.backbone[i];
    stage_vars_.push_back({param(p + "conv.weight", s.conv.weight, trainable == Trainable::all),
                           param(p + "conv.bias", s.conv.bias, trainable == Trainable::all),
                           param(p + "bn.gamma", s.bn.gamma, trainable != Trainable::none),
                           param(p + "bn.beta", s.bn.beta, trainable != Trainable::none)});
  }
  const bool all = trainable == Trainable::all;
  obj_w_ = param("rpn.objectness.weight", model.objectness.weight, all);
  obj_b_ = param("rpn.objectness.bias", model.objectness.bias, all);
  delta_w_ = param("rpn.deltas.weight", model.box_deltas.weight, all);
  delta_b_ = param("rpn.deltas.bias", model.box_deltas.bias, all);
  fc1_w_ = param("roi.fc1.weight", model.fc1.weight, all);
  fc1_b_ = param("roi.fc1.bias", model.fc1.bias, all);
  fc2_w_ = param("roi.fc2.weight", model.fc2.weight, all);
  fc2_b_ = param("roi.fc2.bias", model.fc2.bias, all);
}

Var DetectorGraph::param(const std::string& name, const Tensor& value, bool trainable) {
  return trainable ? tape_.parameter(name, value, true) : tape_.constant(value);
}

DetectorGraph::Backbone DetectorGraph::backbone(const Tensor& images) {
  const std::size_t s = model_.arch.image_size;
  if (images.rank() != 4) throw nn::DimensionError("rank", "images must be [N,3,H,W]");
  if (images.dim(1) != 3) throw nn::DimensionError("channels", "images must have 3 channels");
  if (images.dim(2) != s) throw nn::DimensionError("height", "expected image height " + std::to_string(s));
  if (images.dim(3) != s) throw nn::DimensionError("width", "expected image width " + std::to_string(s));
  Backbone out;
  Var x = tape_.constant(images);
  for (std::size_t i = 0; i < model_.backbone.size(); ++i) {
    const StageVars& v = stage_vars_[i];
    x = nn::conv2d(tape_, x, v.weight, v.bias, 1, 1);
    nn::BatchNormResult bn = nn::batchnorm(tape_, x, v.gamma, v.beta, model_.backbone[i].bn, mode_);
    out.stats.push_back({std::move(bn.batch_mean), std::move(bn.batch_var)});
    x = nn::relu(tape_, bn.output);
    if (model_.arch.stages[i].pool) x = nn::maxpool2(tape_, x);
  }
  out.features = x;
  return out;
}

DetectorGraph::Rpn DetectorGraph::rpn(Var features) {
  return Rpn{nn::conv2d(tape_, features, obj_w_, obj_b_, 1, 0), nn::conv2d(tape_, features, delta_w_, delta_b_, 1, 0)};
}

Var DetectorGraph::anchor_objectness(const Rpn& rpn, std::size_t image) {
  const std::size_t count = model_.arch.anchor_count();
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = image * count + i;
  return nn::gather(tape_, rpn.objectness, std::move(idx), Shape{count});
}

Var DetectorGraph::gather_objectness(const Rpn& rpn, std::size_t image, std::span<const std::size_t> anchor_indices) {
  const std::size_t count = model_.arch.anchor_count();
  std::vector<std::size_t> idx;
  idx.reserve(anchor_indices.size());
  for (std::size_t a : anchor_indices) idx.push_back(image * count + a);
  return nn::gather(tape_, rpn.objectness, std::move(idx), Shape{anchor_indices.size()});
}

std::vector<std::array<double, 4>> DetectorGraph::anchor_deltas(const Rpn& rpn, std::size_t image) const {
  const Tensor& d = tape_.value(rpn.deltas);
  const std::size_t g = model_.arch.grid(), a_count = model_.arch.anchors_per_cell();
  std::vector<std::array<double, 4>> out(anchors_.size());
  for (std::size_t a = 0; a < a_count; ++a)
    for (std::size_t y = 0; y < g; ++y)
      for (std::size_t x = 0; x < g; ++x) {
        const std::size_t i = (a * g + y) * g + x;
        for (std::size_t j = 0; j < 4; ++j) out[i][j] = d.at(image, a * 4 + j, y, x);
      }
  return out;
}

std::vector<Box> DetectorGraph::decode_boxes(const Rpn& rpn, std::size_t image) const {
  const auto deltas = anchor_deltas(rpn, image);
  const double s = static_cast<double>(model_.arch.image_size);
  std::vector<Box> out(anchors_.size());
  for (std::size_t i = 0; i < anchors_.size(); ++i) {
    out[i] = clip(decode_deltas(anchors_[i], std::span<const double, 4>(deltas[i])), s, s);
  }
  return out;
}

DetectorGraph::Proposals DetectorGraph::select_proposals(const Rpn& rpn, std::size_t image) const {
  const std::vector<Box> boxes = decode_boxes(rpn, image);
  const Tensor& obj = tape_.value(rpn.objectness);
  const std::size_t count = model_.arch.anchor_count();
  std::vector<std::size_t> candidates;
  std::vector<Box> cand_boxes;
  std::vector<double> cand_scores;
  for (std::size_t i = 0; i < count; ++i) {
    if (boxes[i].width() < kMinProposalSide || boxes[i].height() < kMinProposalSide) continue;
    candidates.push_back(i);
    cand_boxes.push_back(boxes[i]);
    cand_scores.push_back(obj[image * count + i]);
  }
  const std::vector<std::size_t> kept =
      nms(cand_boxes, cand_scores, model_.arch.proposal_nms_iou, model_.arch.proposals);
  Proposals p;
  for (std::size_t k : kept) {
    p.anchor_index.push_back(candidates[k]);
    p.boxes.push_back(cand_boxes[k]);
  }
  return p;
}

Var DetectorGraph::roi_logits(Var features, std::span<const RoiRef> rois) {
  const Architecture& a = model_.arch;
  const std::size_t c = a.feature_channels(), g = a.grid(), bins = a.roi_grid;
  const double stride = static_cast<double>(a.stride());
  const Tensor& f = tape_.value(features);
  if (f.rank() != 4 || f.dim(1) != c || f.dim(2) != g) throw nn::DimensionError("features", "unexpected feature map");
  std::vector<std::size_t> idx;
  idx.reserve(rois.size() * c * bins * bins);
  auto cell = [g, stride](double coord) {
    const long v = static_cast<long>(std::floor(coord / stride));
    return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(g) - 1));
  };
  for (const RoiRef& r : rois) {
    if (r.image >= f.dim(0)) throw nn::DimensionError("image", "roi image index out of range");
    std::vector<std::size_t> ys(bins), xs(bins);
    for (std::size_t b = 0; b < bins; ++b) {
      const double t = (static_cast<double>(b) + 0.5) / static_cast<double>(bins);
      ys[b] = cell(r.box.y1 + t * r.box.height());
      xs[b] = cell(r.box.x1 + t * r.box.width());
    }
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < bins; ++i)
        for (std::size_t j = 0; j < bins; ++j) idx.push_back(((r.image * c + ch) * g + ys[i]) * g + xs[j]);
  }
  Var pooled = nn::gather(tape_, features, std::move(idx), Shape{rois.size(), c * bins * bins});
  Var h = nn::relu(tape_, nn::dense(tape_, pooled, fc1_w_, fc1_b_));
  return nn::dense(tape_, h, fc2_w_, fc2_b_);
}

namespace {

Tensor as_batch(const Tensor& image) {
  if (image.rank() == 3) return image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)});
  if (image.rank() == 4 && image.dim(0) == 1) return image;
  throw nn::DimensionError("batch", "expected a single image [1,3,H,W], got " + nn::shape_to_string(image.shape()));
}

}  // namespace

TracedOutputs trace_forward(const DetectorModel& model, const Tensor& image, nn::BnMode mode, Trainable trainable) {
  TracedOutputs out;
  out.graph = std::make_unique<DetectorGraph>(model, mode, trainable);
  DetectorGraph& g = *out.graph;
  DetectorGraph::Backbone bb = g.backbone(as_batch(image));
  out.bn_stats = std::move(bb.stats);
  const DetectorGraph::Rpn rpn = g.rpn(bb.features);
  const DetectorGraph::Proposals props = g.select_proposals(rpn, 0);

  out.anchor_objectness = g.anchor_objectness(rpn, 0);
  out.proposal_objectness = g.gather_objectness(rpn, 0, props.anchor_index);
  std::vector<RoiRef> rois;
  for (const Box& b : props.boxes) rois.push_back({0, b});
  out.class_logits = g.roi_logits(bb.features, rois);

  RawOutputs& raw = out.raw;
  raw.proposal_boxes = props.boxes;
  raw.proposal_anchors = props.anchor_index;
  const Tensor& po = g.tape().value(out.proposal_objectness);
  raw.proposal_logits.assign(po.values().begin(), po.values().end());
  raw.class_logits = g.tape().value(out.class_logits);
  raw.anchor_objectness = g.tape().value(out.anchor_objectness);
  const auto deltas = g.anchor_deltas(rpn, 0);
  raw.anchor_deltas = Tensor(Shape{deltas.size(), 4});
  for (std::size_t i = 0; i < deltas.size(); ++i)
    for (std::size_t j = 0; j < 4; ++j) raw.anchor_deltas.at(i, j) = deltas[i][j];
  return out;
}

RawOutputs forward_full(const DetectorModel& model, const Tensor& image, nn::BnMode mode) {
  return trace_forward(model, image, mode, Trainable::none).raw;
}

Prediction postprocess(const RawOutputs& raw, double score_threshold, double nms_iou) {
  Prediction out;
  const Tensor& logits = raw.class_logits;
  if (logits.empty()) return out;
  const Tensor probs = nn::kernel::softmax_rows(logits);
  const std::size_t k = probs.dim(0), classes = probs.dim(1) - 1;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t r = 0; r < k; ++r) {
      if (probs.at(r, c) >= score_threshold) {
        boxes.push_back(raw.proposal_boxes[r]);
        scores.push_back(probs.at(r, c));
      }
    }
    for (std::size_t i : nms(boxes, scores, nms_iou)) out.push_back(Detection{boxes[i], c, scores[i]});
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

Prediction predict(const DetectorModel& model, const Tensor& image, double score_threshold, double nms_iou) {
  return postprocess(forward_full(model, image, nn::BnMode::eval), score_threshold, nms_iou);
}

}  // namespace wstta::detector
