#include "wstta/detector/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "wstta/util/rng.hpp"

namespace wstta::detector {

using nn::Shape;
using nn::Tensor;

Architecture Architecture::micro() {
  Architecture a;
  a.image_size = 16;
  a.stages = {{4, true}, {4, false}};
  a.anchor_sizes = {4.0, 8.0};
  a.proposals = 8;
  a.roi_grid = 2;
  a.hidden = 8;
  return a;
}

std::size_t Architecture::stride() const {
  std::size_t s = 1;
  for (const BackboneStage& st : stages) s *= st.pool ? 2 : 1;
  return s;
}

void Architecture::validate() const {
  if (stages.empty()) throw nn::UsageError("architecture needs at least one backbone stage");
  for (const BackboneStage& st : stages) {
    if (st.channels == 0) throw nn::UsageError("backbone stage with zero channels");
  }
  if (image_size == 0 || image_size % stride() != 0) {
    throw nn::UsageError("image size must be a positive multiple of the backbone stride");
  }
  if (anchor_sizes.empty()) throw nn::UsageError("at least one anchor size required");
  if (proposals == 0 || roi_grid == 0 || hidden == 0) throw nn::UsageError("proposal/roi sizes must be positive");
}

namespace {

Tensor he_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

DetectorModel build_model(std::uint64_t seed, std::vector<std::string> categories, Architecture arch) {
  if (categories.empty()) throw nn::UsageError("detector needs at least one category");
  arch.validate();
  DetectorModel m;
  m.categories = std::move(categories);
  m.arch = std::move(arch);
  Rng rng(derive_key({seed, 0x6d6f64656cULL}));

  std::size_t in = 3;
  for (const BackboneStage& st : m.arch.stages) {
    StageParams p;
    p.conv.weight = he_uniform(rng, Shape{st.channels, in, 3, 3}, in * 9);
    p.conv.bias = Tensor(Shape{st.channels}, 0.0);
    p.bn = nn::BatchNormLayer(st.channels);
    m.backbone.push_back(std::move(p));
    in = st.channels;
  }
  const std::size_t a = m.arch.anchors_per_cell();
  // heads start small so initial objectness/deltas are near neutral
  m.objectness.weight = he_uniform(rng, Shape{a, in, 1, 1}, in);
  for (double& v : m.objectness.weight.values()) v *= 0.1;
  m.objectness.bias = Tensor(Shape{a}, 0.0);
  m.box_deltas.weight = he_uniform(rng, Shape{4 * a, in, 1, 1}, in);
  for (double& v : m.box_deltas.weight.values()) v *= 0.1;
  m.box_deltas.bias = Tensor(Shape{4 * a}, 0.0);
  m.fc1.weight = he_uniform(rng, Shape{m.arch.hidden, m.arch.roi_features()}, m.arch.roi_features());
  m.fc1.bias = Tensor(Shape{m.arch.hidden}, 0.0);
  m.fc2.weight = he_uniform(rng, Shape{m.num_classes() + 1, m.arch.hidden}, m.arch.hidden);
  for (double& v : m.fc2.weight.values()) v *= 0.1;
  m.fc2.bias = Tensor(Shape{m.num_classes() + 1}, 0.0);
  return m;
}

std::vector<SlotRef> DetectorModel::slots() {
  std::vector<SlotRef> out;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    const std::string p = "backbone." + std::to_string(i) + ".";
    StageParams& s = backbone[i];
    out.push_back({p + "conv.weight", SlotKind::weight, &s.conv.weight});
    out.push_back({p + "conv.bias", SlotKind::bias, &s.conv.bias});
    out.push_back({p + "bn.gamma", SlotKind::bn_gamma, &s.bn.gamma});
    out.push_back({p + "bn.beta", SlotKind::bn_beta, &s.bn.beta});
    out.push_back({p + "bn.running_mean", SlotKind::bn_running_mean, &s.bn.running_mean});
    out.push_back({p + "bn.running_var", SlotKind::bn_running_var, &s.bn.running_var});
  }
  out.push_back({"rpn.objectness.weight", SlotKind::weight, &objectness.weight});
  out.push_back({"rpn.objectness.bias", SlotKind::bias, &objectness.bias});
  out.push_back({"rpn.deltas.weight", SlotKind::weight, &box_deltas.weight});
  out.push_back({"rpn.deltas.bias", SlotKind::bias, &box_deltas.bias});
  out.push_back({"roi.fc1.weight", SlotKind::weight, &fc1.weight});
  out.push_back({"roi.fc1.bias", SlotKind::bias, &fc1.bias});
  out.push_back({"roi.fc2.weight", SlotKind::weight, &fc2.weight});
  out.push_back({"roi.fc2.bias", SlotKind::bias, &fc2.bias});
  return out;
}

std::vector<ConstSlotRef> DetectorModel::slots() const {
  std::vector<ConstSlotRef> out;
  for (const SlotRef& s : const_cast<DetectorModel*>(this)->slots()) out.push_back({s.name, s.kind, s.tensor});
  return out;
}

std::uint64_t tensor_digest(const Tensor& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint64_t word) {
    for (int b = 0; b < 8; ++b) {
      h ^= (word >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t d : t.shape()) feed(d);
  for (double v : t.values()) feed(std::bit_cast<std::uint64_t>(v));
  return h;
}

std::vector<std::pair<std::string, std::uint64_t>> parameter_digest(const DetectorModel& model) {
  std::vector<std::pair<std::string, std::uint64_t>> out;
  for (const ConstSlotRef& s : model.slots()) out.emplace_back(s.name, tensor_digest(*s.tensor));
  return out;
}

}  // namespace wstta::detector
