#include "wstta/adapt/labels.hpp"

#include <algorithm>
#include <string>

#include "wstta/nn/tensor.hpp"

namespace wstta::adapt {

WeakLabel::WeakLabel(std::vector<std::size_t> categories) : categories_(std::move(categories)) {
  std::sort(categories_.begin(), categories_.end());
  categories_.erase(std::unique(categories_.begin(), categories_.end()), categories_.end());
}

bool WeakLabel::contains(std::size_t category) const noexcept {
  return std::binary_search(categories_.begin(), categories_.end(), category);
}

void WeakLabel::validate(std::size_t num_classes) const {
  for (std::size_t c : categories_) {
    if (c >= num_classes) {
      throw nn::UsageError("weak label category " + std::to_string(c) + " out of range for " +
                           std::to_string(num_classes) + " categories");
    }
  }
}

PseudoLabel make_pseudo_label(const detector::Prediction& prediction, const WeakLabel& weak, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw nn::UsageError("pseudo-label threshold must lie in [0,1]");
  PseudoLabel out;
  for (const detector::Detection& d : prediction) {
    if (d.score >= tau && weak.contains(d.category)) out.push_back({d.box, d.category});
  }
  return out;
}

std::vector<double> multi_hot(const WeakLabel& weak, std::size_t num_classes) {
  weak.validate(num_classes);
  std::vector<double> v(num_classes, 0.0);
  for (std::size_t c : weak.categories()) v[c] = 1.0;
  return v;
}

WeakLabel from_multi_hot(std::span<const double> vector) {
  std::vector<std::size_t> cats;
  for (std::size_t i = 0; i < vector.size(); ++i) {
    if (vector[i] >= 0.5) cats.push_back(i);
  }
  return WeakLabel(std::move(cats));
}

}  // namespace wstta::adapt
