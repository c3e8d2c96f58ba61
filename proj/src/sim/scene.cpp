#include "wstta/sim/scene.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace wstta::sim {

using nn::Tensor;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kPlacementAttempts = 64;
constexpr double kMinContrast = 0.3;
constexpr double kGap = 2.0;

bool covers(const SceneObject& o, double px, double py) {
  const double h = o.size / 2.0;
  switch (o.category) {
    case Shape::disc:
      return (px - o.cx) * (px - o.cx) + (py - o.cy) * (py - o.cy) <= h * h;
    case Shape::square:
      return std::abs(px - o.cx) <= h && std::abs(py - o.cy) <= h;
    case Shape::triangle: {
      // apex up, base at the bottom edge of the bounding square
      if (py < o.cy - h || py > o.cy + h) return false;
      const double t = (py - (o.cy - h)) / o.size;  // 0 at apex, 1 at base
      return std::abs(px - o.cx) <= t * h;
    }
  }
  return false;
}

}  // namespace

const std::vector<std::string>& category_names() {
  static const std::vector<std::string> names{"disc", "triangle", "square"};
  return names;
}

Frame render_frame(const StreamConfig& config, std::uint64_t index) {
  const std::size_t s = config.image_size;
  Rng rng(derive_key({config.seed, index, 0x7363656e65ULL}));
  Frame f;
  f.frame_id = index;
  f.image = Tensor(nn::Shape{3, s, s});

  // background: base colour, two low-frequency waves and fine grain
  double base[3];
  for (double& c : base) c = rng.uniform(0.4, 0.6);
  const double fx = rng.uniform(0.5, 2.0) * 2 * kPi / static_cast<double>(s);
  const double fy = rng.uniform(0.5, 2.0) * 2 * kPi / static_cast<double>(s);
  const double phase = rng.uniform(0, 2 * kPi);
  const double amp = rng.uniform(0.03, 0.08);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double wave = amp * std::sin(fx * static_cast<double>(x) + phase) * std::cos(fy * static_cast<double>(y));
      for (std::size_t c = 0; c < 3; ++c) {
        f.image[(c * s + y) * s + x] = std::clamp(base[c] + wave + rng.uniform(-0.03, 0.03), 0.0, 1.0);
      }
    }

  const std::size_t wanted = config.min_objects + rng.below(config.max_objects - config.min_objects + 1);
  std::vector<SceneObject> placed;
  std::vector<detector::Box> extents;
  for (std::size_t n = 0; n < wanted; ++n) {
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      SceneObject o;
      o.category = static_cast<Shape>(rng.below(3));
      o.size = std::floor(rng.uniform(config.min_size, config.max_size + 1.0));
      const double h = o.size / 2.0;
      o.cx = rng.uniform(h + 1.0, static_cast<double>(s) - h - 1.0);
      o.cy = rng.uniform(h + 1.0, static_cast<double>(s) - h - 1.0);
      const detector::Box ext{o.cx - h - kGap, o.cy - h - kGap, o.cx + h + kGap, o.cy + h + kGap};
      const bool overlaps = std::any_of(extents.begin(), extents.end(), [&](const detector::Box& e) {
        return e.x1 < ext.x2 && ext.x1 < e.x2 && e.y1 < ext.y2 && ext.y1 < e.y2;
      });
      if (overlaps) continue;
      double contrast = 0.0;
      do {
        contrast = 0.0;
        for (int c = 0; c < 3; ++c) {
          o.rgb[c] = rng.uniform();
          contrast += std::abs(o.rgb[c] - base[c]) / 3.0;
        }
      } while (contrast < kMinContrast);
      placed.push_back(o);
      extents.push_back(ext);
      break;
    }
  }
  if (placed.empty()) throw std::logic_error("scene generator failed to place any object");

  for (const SceneObject& o : placed) {
    long x1 = static_cast<long>(s), y1 = static_cast<long>(s), x2 = -1, y2 = -1;
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        if (!covers(o, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
        for (std::size_t c = 0; c < 3; ++c) f.image[(c * s + y) * s + x] = o.rgb[c];
        x1 = std::min<long>(x1, static_cast<long>(x));
        y1 = std::min<long>(y1, static_cast<long>(y));
        x2 = std::max<long>(x2, static_cast<long>(x));
        y2 = std::max<long>(y2, static_cast<long>(y));
      }
    f.objects.push_back({detector::Box{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1),
                                       static_cast<double>(y2 + 1)},
                         static_cast<std::size_t>(o.category)});
  }
  return f;
}

Tensor apply_domain_shift(const Tensor& image, const DomainSpec& spec, Rng& rng) {
  if (image.rank() != 3 || image.dim(0) != 3) throw nn::DimensionError("channels", "expected a [3,H,W] image");
  const double th = spec.hue_degrees * kPi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th), k = (1.0 - cs) / 3.0, r = std::sqrt(1.0 / 3.0) * sn;
  const double m[3][3] = {{cs + k, k - r, k + r}, {k + r, cs + k, k - r}, {k - r, k + r, cs + k}};
  const std::size_t plane = image.dim(1) * image.dim(2);
  Tensor out(image.shape());
  for (std::size_t i = 0; i < plane; ++i) {
    const double px[3] = {image[i], image[plane + i], image[2 * plane + i]};
    for (std::size_t c = 0; c < 3; ++c) {
      double v = spec.hue_degrees != 0.0 ? m[c][0] * px[0] + m[c][1] * px[1] + m[c][2] * px[2] : px[c];
      v = v * (1.0 - spec.fog_alpha) + 0.5 * spec.fog_alpha + spec.brightness_shift;
      if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
      out[c * plane + i] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

adapt::WeakLabel weak_label_oracle(const Frame& frame) {
  std::vector<std::size_t> cats;
  for (const detector::LabeledBox& o : frame.objects) cats.push_back(o.category);
  return adapt::WeakLabel(std::move(cats));
}

std::vector<double> inject_label_noise(std::span<const double> target, double rho, Rng& rng) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw nn::UsageError("noise ratio must lie in [0,1]");
  std::vector<double> out(target.begin(), target.end());
  for (double& v : out) {
    if (rng.bernoulli(rho)) v = v >= 0.5 ? 0.0 : 1.0;
  }
  return out;
}

const char* split_name(Split split) {
  switch (split) {
    case Split::source_train: return "source-train";
    case Split::source_test: return "source-test";
    case Split::target_stream: return "target-stream";
    case Split::target_test: return "target-test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  for (Split s : {Split::source_train, Split::source_test, Split::target_stream, Split::target_test}) {
    if (name == split_name(s)) return s;
  }
  throw nn::UsageError("unknown split '" + name + "'");
}

bool is_target(Split split) { return split == Split::target_stream || split == Split::target_test; }

std::size_t DatasetSpec::split_size(Split split) const {
  switch (split) {
    case Split::source_train: return source_train;
    case Split::source_test: return source_test;
    case Split::target_stream: return target_stream;
    case Split::target_test: return target_test;
  }
  return 0;
}

StreamConfig split_stream(const DatasetSpec& spec, Split split) {
  StreamConfig c;
  c.seed = derive_key({spec.seed, static_cast<std::uint64_t>(split)});
  c.image_size = spec.image_size;
  return c;
}

Frame make_frame(const DatasetSpec& spec, Split split, std::size_t index) {
  Frame f = render_frame(split_stream(spec, split), index);
  if (is_target(split)) {
    Rng rng(derive_key({spec.seed, static_cast<std::uint64_t>(split), index, 0x666f67ULL}));
    f.image = apply_domain_shift(f.image, spec.target, rng);
  }
  f.frame_id = (static_cast<std::uint64_t>(split) << 32) | index;
  return f;
}

std::vector<Frame> make_split(const DatasetSpec& spec, Split split, std::size_t count) {
  std::vector<Frame> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_frame(spec, split, i));
  return out;
}

}  // namespace wstta::sim
