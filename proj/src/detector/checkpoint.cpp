#include "wstta/detector/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace wstta::detector {

using nn::Shape;
using nn::Tensor;

namespace {

constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    u8(kDtypeF64);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    for (double v : t.values()) f64(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  std::size_t offset() const { return pos_; }
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw CheckpointError(pos_, std::string("truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  /// Element count that must still fit in the remaining bytes.
  std::uint32_t count(const char* what, std::size_t min_bytes_each) {
    const std::size_t at = pos_;
    const std::uint32_t n = u32(what);
    if (static_cast<std::uint64_t>(n) * min_bytes_each > b_.size() - pos_) {
      throw CheckpointError(at, std::string("implausible ") + what);
    }
    return n;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(b_.begin() + static_cast<long>(pos_), b_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

// Rejects headers whose parameter count could not fit in the file before
// anything is allocated.
bool plausible(const Architecture& a, std::size_t classes, std::size_t file_size) {
  double params = 0.0, in = 3.0;
  for (const BackboneStage& s : a.stages) {
    params += static_cast<double>(s.channels) * in * 9.0;
    in = static_cast<double>(s.channels);
  }
  const double grid = static_cast<double>(a.roi_grid);
  params += in * grid * grid * static_cast<double>(a.hidden);
  params += static_cast<double>(classes + 1) * static_cast<double>(a.hidden);
  return params * 8.0 <= static_cast<double>(file_size) && a.proposals <= (1u << 20) && a.image_size <= (1u << 16);
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const DetectorModel& model) {
  Writer w;
  for (char c : kCheckpointMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(model.categories.size()));
  for (const std::string& c : model.categories) w.str(c);

  const Architecture& a = model.arch;
  w.u32(static_cast<std::uint32_t>(a.image_size));
  w.u32(static_cast<std::uint32_t>(a.stages.size()));
  for (const BackboneStage& s : a.stages) {
    w.u32(static_cast<std::uint32_t>(s.channels));
    w.u8(s.pool ? 1 : 0);
  }
  w.u32(static_cast<std::uint32_t>(a.anchor_sizes.size()));
  for (double s : a.anchor_sizes) w.f64(s);
  w.u32(static_cast<std::uint32_t>(a.proposals));
  w.f64(a.proposal_nms_iou);
  w.u32(static_cast<std::uint32_t>(a.roi_grid));
  w.u32(static_cast<std::uint32_t>(a.hidden));

  const auto slots = model.slots();
  w.u32(static_cast<std::uint32_t>(slots.size() + 2 * model.backbone.size()));
  for (const ConstSlotRef& s : slots) w.tensor(s.name, *s.tensor);
  for (std::size_t i = 0; i < model.backbone.size(); ++i) {
    const std::string p = "backbone." + std::to_string(i) + ".bn.";
    w.tensor(p + "momentum", Tensor::scalar(model.backbone[i].bn.momentum));
    w.tensor(p + "epsilon", Tensor::scalar(model.backbone[i].bn.epsilon));
  }
  return w.take();
}

DetectorModel deserialize_model(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  for (char c : kCheckpointMagic) {
    if (r.u8("magic") != static_cast<std::uint8_t>(c)) throw CheckpointError(r.offset() - 1, "bad magic bytes");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(r.offset() - 4, "unsupported version " + std::to_string(version));
  }
  std::vector<std::string> categories(r.count("category count", 4));
  for (std::string& c : categories) c = r.str("category name");

  Architecture a;
  a.image_size = r.u32("image size");
  a.stages.assign(r.count("stage count", 5), {});
  for (BackboneStage& s : a.stages) {
    s.channels = r.u32("stage channels");
    s.pool = r.u8("stage pool") != 0;
  }
  a.anchor_sizes.assign(r.count("anchor count", 8), 0.0);
  for (double& s : a.anchor_sizes) s = r.f64("anchor size");
  a.proposals = r.u32("proposals");
  a.proposal_nms_iou = r.f64("proposal nms");
  a.roi_grid = r.u32("roi grid");
  a.hidden = r.u32("hidden");
  const std::size_t arch_end = r.offset();
  if (!plausible(a, categories.size(), bytes.size())) throw CheckpointError(arch_end, "implausible architecture");

  DetectorModel model;
  try {
    model = build_model(0, std::move(categories), a);
  } catch (const std::exception& e) {
    throw CheckpointError(arch_end, std::string("invalid header: ") + e.what());
  }

  std::map<std::string, Tensor> tensors;
  const std::uint32_t count = r.count("tensor count", 9);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.offset();
    std::string name = r.str("tensor name");
    if (r.u8("dtype") != kDtypeF64) throw CheckpointError(r.offset() - 1, "unknown dtype for '" + name + "'");
    Shape shape(r.count("rank", 8));
    for (std::size_t& d : shape) d = r.u64("dimension");
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d != 0 && n > (bytes.size() / 8) / d) throw CheckpointError(r.offset(), "implausible shape for '" + name + "'");
      n *= d;
    }
    r.need(n * 8, "tensor values");
    std::vector<double> values(n);
    for (double& v : values) v = r.f64("tensor value");
    if (!tensors.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
      throw CheckpointError(start, "duplicate tensor '" + name + "'");
    }
  }
  if (r.offset() != bytes.size()) throw CheckpointError(r.offset(), "trailing bytes");

  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError(r.offset(), "missing tensor '" + name + "'");
    if (it->second.shape() != shape) throw CheckpointError(r.offset(), "shape mismatch for '" + name + "'");
    Tensor t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  for (SlotRef& s : model.slots()) *s.tensor = take(s.name, s.tensor->shape());
  for (std::size_t i = 0; i < model.backbone.size(); ++i) {
    const std::string p = "backbone." + std::to_string(i) + ".bn.";
    model.backbone[i].bn.momentum = take(p + "momentum", Shape{1}).item();
    model.backbone[i].bn.epsilon = take(p + "epsilon", Shape{1}).item();
    try {
      model.backbone[i].bn.validate();
    } catch (const std::exception& e) {
      throw CheckpointError(r.offset(), e.what());
    }
  }
  if (!tensors.empty()) throw CheckpointError(r.offset(), "unexpected tensor '" + tensors.begin()->first + "'");
  return model;
}

void save_checkpoint(const DetectorModel& model, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

DetectorModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace wstta::detector
