#include "wstta/detector/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "wstta/detector/anchors.hpp"
#include "wstta/detector/network.hpp"
#include "wstta/nn/ops.hpp"
#include "wstta/util/rng.hpp"

namespace wstta::detector {

using nn::Shape;
using nn::Tensor;
using nn::Var;

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kBoxBeta = 0.1;

struct AdamSlot {
  Tensor m, v;
};

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

/// Picks up to `total` indices with at most `max_fg` from `fg`, rest from `bg`.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> sample_split(std::vector<std::size_t> fg,
                                                                           std::vector<std::size_t> bg,
                                                                           std::size_t total, std::size_t max_fg,
                                                                           Rng& rng) {
  shuffle(fg, rng);
  shuffle(bg, rng);
  fg.resize(std::min(fg.size(), max_fg));
  bg.resize(std::min(bg.size(), total - fg.size()));
  return {std::move(fg), std::move(bg)};
}

}  // namespace

PretrainResult pretrain(DetectorModel model, std::span<const TrainingSample> data, const PretrainConfig& config,
                        const PretrainProgress& progress) {
  PretrainResult result;
  if (config.steps == 0) {
    result.model = std::move(model);
    return result;
  }
  if (data.empty()) throw nn::UsageError("pretraining needs at least one sample");
  if (config.batch_size == 0) throw nn::UsageError("batch size must be positive");

  const Architecture& arch = model.arch;
  const std::size_t s = arch.image_size, count = arch.anchor_count(), a_per = arch.anchors_per_cell();
  const std::size_t g = arch.grid();
  Rng rng(derive_key({config.seed, 0x7072657472ULL}));
  std::map<std::string, AdamSlot> adam;

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);
  std::size_t cursor = 0;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::size_t b = config.batch_size;
    Tensor images(Shape{b, 3, s, s});
    std::vector<const TrainingSample*> batch;
    for (std::size_t i = 0; i < b; ++i) {
      if (cursor == order.size()) {
        shuffle(order, rng);
        cursor = 0;
      }
      const TrainingSample& sample = data[order[cursor++]];
      if (sample.image.size() != 3 * s * s) throw nn::DimensionError("image", "training image has wrong size");
      std::copy(sample.image.values().begin(), sample.image.values().end(), images.data() + i * 3 * s * s);
      batch.push_back(&sample);
    }

    DetectorGraph graph(model, nn::BnMode::adapt, Trainable::all);
    nn::Tape& tape = graph.tape();
    DetectorGraph::Backbone bb = graph.backbone(images);
    const DetectorGraph::Rpn rpn = graph.rpn(bb.features);

    std::vector<Var> terms;
    std::vector<RoiRef> rois;
    std::vector<int> roi_labels;
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<Box> gt_boxes;
      for (const LabeledBox& o : batch[i]->objects) gt_boxes.push_back(o.box);

      // proposal head: objectness + deltas on sampled anchors
      const std::vector<AnchorMatch> match = assign_anchors(graph.anchors(), gt_boxes);
      std::vector<std::size_t> pos, neg;
      for (std::size_t a = 0; a < count; ++a) {
        if (match[a].label == AnchorLabel::positive) pos.push_back(a);
        if (match[a].label == AnchorLabel::negative) neg.push_back(a);
      }
      auto [spos, sneg] = sample_split(pos, neg, config.rpn_batch, config.rpn_batch / 2, rng);
      std::vector<double> targets(count, 0.0), weights(count, 0.0);
      for (std::size_t a : spos) targets[a] = weights[a] = 1.0;
      for (std::size_t a : sneg) weights[a] = 1.0;
      terms.push_back(nn::bce_with_logits(tape, graph.anchor_objectness(rpn, i), targets, weights));

      if (!spos.empty()) {
        std::vector<std::size_t> idx;
        std::vector<double> dt, dw;
        for (std::size_t a : spos) {
          const std::size_t size_i = a / (g * g), cell = a % (g * g);
          const auto enc = encode_deltas(graph.anchors()[a], gt_boxes[match[a].target]);
          for (std::size_t j = 0; j < 4; ++j) {
            idx.push_back((i * 4 * a_per + size_i * 4 + j) * g * g + cell);
            dt.push_back(enc[j]);
            dw.push_back(1.0);
          }
        }
        const std::size_t n = idx.size();
        Var d = nn::gather(tape, rpn.deltas, std::move(idx), Shape{n});
        terms.push_back(nn::scale(
            tape, nn::smooth_l1(tape, d, dt, dw, kBoxBeta, static_cast<double>(spos.size())), config.box_loss_weight));
      }

      // ROI head: current proposals plus ground truth
      DetectorGraph::Proposals props = graph.select_proposals(rpn, i);
      std::vector<Box> cand = props.boxes;
      cand.insert(cand.end(), gt_boxes.begin(), gt_boxes.end());
      std::vector<std::size_t> fg, bg;
      std::vector<int> label(cand.size(), static_cast<int>(model.background()));
      for (std::size_t r = 0; r < cand.size(); ++r) {
        double best = 0.0;
        for (std::size_t t = 0; t < gt_boxes.size(); ++t) {
          const double v = iou(cand[r], gt_boxes[t]);
          if (v > best) {
            best = v;
            if (v >= kPositiveIou) label[r] = static_cast<int>(batch[i]->objects[t].category);
          }
        }
        (best >= kPositiveIou ? fg : bg).push_back(r);
      }
      const auto max_fg = static_cast<std::size_t>(config.roi_fg_fraction * static_cast<double>(config.roi_batch));
      auto [sfg, sbg] = sample_split(fg, bg, config.roi_batch, max_fg, rng);
      for (const auto* set : {&sfg, &sbg}) {
        for (std::size_t r : *set) {
          rois.push_back({i, cand[r]});
          roi_labels.push_back(label[r]);
        }
      }
    }
    Var logits = graph.roi_logits(bb.features, rois);
    // per-image terms were means per image; ROI CE is a mean over the batch
    Var total = terms[0];
    for (std::size_t t = 1; t < terms.size(); ++t) total = nn::add(tape, total, terms[t]);
    total = nn::scale(tape, total, 1.0 / static_cast<double>(b));
    total = nn::add(tape, total, nn::softmax_cross_entropy(tape, logits, roi_labels));

    const double loss = tape.value(total).item();
    if (!std::isfinite(loss)) throw std::runtime_error("pretraining loss became non-finite at step " + std::to_string(step));
    const nn::Gradients grads = tape.backward(total);

    const double lr = config.learning_rate *
                      (static_cast<double>(step) >= config.lr_drop_at * static_cast<double>(config.steps) ? config.lr_drop : 1.0);
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(kAdamBeta1, t), c2 = 1.0 - std::pow(kAdamBeta2, t);
    for (SlotRef& slot : model.slots()) {
      auto it = grads.find(slot.name);
      if (it == grads.end()) continue;
      AdamSlot& st = adam[slot.name];
      if (st.m.empty()) {
        st.m = Tensor(slot.tensor->shape());
        st.v = Tensor(slot.tensor->shape());
      }
      const Tensor& gr = it->second;
      for (std::size_t k = 0; k < gr.size(); ++k) {
        st.m[k] = kAdamBeta1 * st.m[k] + (1 - kAdamBeta1) * gr[k];
        st.v[k] = kAdamBeta2 * st.v[k] + (1 - kAdamBeta2) * gr[k] * gr[k];
        (*slot.tensor)[k] -= lr * (st.m[k] / c1) / (std::sqrt(st.v[k] / c2) + kAdamEps);
      }
    }
    for (std::size_t l = 0; l < model.backbone.size(); ++l) {
      nn::BatchNormLayer& bn = model.backbone[l].bn;
      nn::update_running_stats(bn, bb.stats[l].mean, bb.stats[l].var, bn.momentum);
    }
    result.loss_curve.push_back(loss);
    if (progress) progress(step, loss);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace wstta::detector
