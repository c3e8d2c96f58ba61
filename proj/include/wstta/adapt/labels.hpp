#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "wstta/detector/box.hpp"

namespace wstta::adapt {

/// Operator-supplied set of category indices present in a frame. Kept
/// sorted and duplicate-free.
class WeakLabel {
 public:
  WeakLabel() = default;
  explicit WeakLabel(std::vector<std::size_t> categories);

  const std::vector<std::size_t>& categories() const noexcept { return categories_; }
  bool contains(std::size_t category) const noexcept;
  std::size_t size() const noexcept { return categories_.size(); }
  bool empty() const noexcept { return categories_.empty(); }

  /// Throws UsageError when an index is >= num_classes.
  void validate(std::size_t num_classes) const;

  friend bool operator==(const WeakLabel&, const WeakLabel&) = default;

 private:
  std::vector<std::size_t> categories_;
};

using PseudoLabel = std::vector<detector::LabeledBox>;

/// Keeps (box, category) of every detection with score >= tau whose
/// category is in the weak label, preserving order.
PseudoLabel make_pseudo_label(const detector::Prediction& prediction, const WeakLabel& weak, double tau);

/// Length-L {0,1} vector with ones at the weak label's categories.
std::vector<double> multi_hot(const WeakLabel& weak, std::size_t num_classes);

/// Inverse of multi_hot: indices of entries >= 0.5.
WeakLabel from_multi_hot(std::span<const double> vector);

}  // namespace wstta::adapt
