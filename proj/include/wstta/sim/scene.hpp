#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wstta/adapt/labels.hpp"
#include "wstta/detector/box.hpp"
#include "wstta/nn/tensor.hpp"
#include "wstta/util/rng.hpp"

namespace wstta::sim {

enum class Shape : std::size_t { disc = 0, triangle = 1, square = 2 };

/// Category names in index order.
const std::vector<std::string>& category_names();

struct SceneObject {
  Shape category = Shape::disc;
  double cx = 0, cy = 0;  // pixel centre
  double size = 0;        // [8, 28]
  double rgb[3] = {0, 0, 0};
};

struct Frame {
  nn::Tensor image;  // [3,S,S], values in [0,1]
  std::vector<detector::LabeledBox> objects;
  std::uint64_t frame_id = 0;
};

struct StreamConfig {
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  double min_size = 8.0;
  double max_size = 28.0;
};

/// Appearance change applied on top of a rendered frame.
struct DomainSpec {
  double fog_alpha = 0.0;         // blend toward uniform gray
  double brightness_shift = 0.0;  // additive
  double noise_sigma = 0.0;       // additive Gaussian
  double hue_degrees = 0.0;       // rotation about the gray axis

  static DomainSpec identity() { return {}; }
  static DomainSpec default_target() { return {0.5, -0.1, 0.05, 40.0}; }
  bool is_identity() const noexcept {
    return fog_alpha == 0.0 && brightness_shift == 0.0 && noise_sigma == 0.0 && hue_degrees == 0.0;
  }
};

/// Pure function of (config.seed, index): textured background, 1-4
/// non-overlapping shapes, boxes tight around the rasterised pixels.
Frame render_frame(const StreamConfig& config, std::uint64_t index);

/// clamp(hue_rotate(img)*(1-fog) + 0.5*fog + brightness + N(0, sigma^2)).
nn::Tensor apply_domain_shift(const nn::Tensor& image, const DomainSpec& spec, Rng& rng);

/// Exactly the set of categories among the frame's ground truth.
adapt::WeakLabel weak_label_oracle(const Frame& frame);

/// Flips each bit of a multi-hot vector independently with probability rho.
std::vector<double> inject_label_noise(std::span<const double> target, double rho, Rng& rng);

enum class Split : std::uint64_t { source_train = 0, source_test = 1, target_stream = 2, target_test = 3 };

const char* split_name(Split split);
Split parse_split(const std::string& name);
bool is_target(Split split);

/// The four default splits. Source and target frames share the geometry
/// generator; target splits additionally pass through `target`.
struct DatasetSpec {
  std::uint64_t seed = 7;
  std::size_t source_train = 2000;
  std::size_t source_test = 500;
  std::size_t target_stream = 1000;
  std::size_t target_test = 500;
  DomainSpec target = DomainSpec::default_target();
  std::size_t image_size = 64;

  std::size_t split_size(Split split) const;
};

/// Geometry generator used for one split.
StreamConfig split_stream(const DatasetSpec& spec, Split split);

/// Frame `index` of a split; frame_id = split << 32 | index.
Frame make_frame(const DatasetSpec& spec, Split split, std::size_t index);

std::vector<Frame> make_split(const DatasetSpec& spec, Split split, std::size_t count);

}  // namespace wstta::sim
