#include "wstta/sim/dataset_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include <json.hpp>

namespace wstta::sim {

using nn::Tensor;

namespace {

struct ReadCursor {
  const std::vector<std::uint8_t>* bytes;
  std::size_t offset;
};

void on_warning(png_structp, png_const_charp) {}

// libpng reports errors with longjmp; these helpers keep every C++ object
// with a destructor outside the setjmp frame.
bool write_rgb(png_structp png, png_infop info, std::vector<std::uint8_t>* out, const std::uint8_t* rgb,
               std::size_t w, std::size_t h) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_set_write_fn(
      png, out,
      [](png_structp p, png_bytep data, png_size_t len) {
        auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        v->insert(v->end(), data, data + len);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) png_write_row(png, const_cast<std::uint8_t*>(rgb) + y * w * 3);
  png_write_end(png, nullptr);
  return true;
}

bool read_header(png_structp png, png_infop info, ReadCursor* cur, std::size_t* w, std::size_t* h) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_set_read_fn(png, cur, [](png_structp p, png_bytep data, png_size_t len) {
    auto* c = static_cast<ReadCursor*>(png_get_io_ptr(p));
    if (c->offset + len > c->bytes->size()) png_error(p, "truncated stream");
    std::memcpy(data, c->bytes->data() + c->offset, len);
    c->offset += len;
  });
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_channels(png, info) != 3) return false;
  *w = png_get_image_width(png, info);
  *h = png_get_image_height(png, info);
  return true;
}

bool read_rows(png_structp png, std::uint8_t* rgb, std::size_t w, std::size_t h) {
  if (setjmp(png_jmpbuf(png))) return false;
  for (std::size_t y = 0; y < h; ++y) png_read_row(png, rgb + y * w * 3, nullptr);
  return true;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw nn::DimensionError("channels", "expected a [3,H,W] image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> rgb(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image[(c * h + y) * w + x], 0.0, 1.0);
        rgb[(y * w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, on_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  const bool ok = info && write_rgb(png, info, &out, rgb.data(), w, h);
  png_destroy_write_struct(&png, &info);
  if (!ok) throw std::runtime_error("png: encoding failed");
  return out;
}

Tensor decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw std::runtime_error("png: not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, on_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  ReadCursor cur{&bytes, 0};
  std::size_t w = 0, h = 0;
  std::vector<std::uint8_t> rgb;
  bool ok = info && read_header(png, info, &cur, &w, &h);
  if (ok) {
    rgb.resize(w * h * 3);
    ok = read_rows(png, rgb.data(), w, h);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw std::runtime_error("png: decoding failed");
  Tensor out(nn::Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c] / 255.0;
  return out;
}

void write_png(const std::string& path, const Tensor& image) {
  const std::vector<std::uint8_t> bytes = encode_png(image);
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("cannot write " + path);
}

Tensor read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return decode_png(bytes);
}

void export_frames(const std::string& dir, const std::vector<Frame>& frames, const std::vector<std::string>& names) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream ann(fs::path(dir) / kAnnotationFile);
  if (!ann) throw std::runtime_error("cannot write annotations in " + dir);
  for (const Frame& f : frames) {
    const std::string file = "frame_" + std::to_string(f.frame_id) + ".png";
    write_png((fs::path(dir) / file).string(), f.image);
    nlohmann::json rec{{"frame_id", f.frame_id}, {"file", file}};
    nlohmann::json boxes = nlohmann::json::array(), cats = nlohmann::json::array();
    for (const detector::LabeledBox& o : f.objects) {
      boxes.push_back({o.box.x1, o.box.y1, o.box.x2, o.box.y2});
      cats.push_back(names.at(o.category));
    }
    rec["boxes"] = boxes;
    rec["categories"] = cats;
    ann << rec.dump() << '\n';
  }
  if (!ann) throw std::runtime_error("write failed in " + dir);
}

std::vector<Frame> import_frames(const std::string& dir, const std::vector<std::string>& names) {
  namespace fs = std::filesystem;
  std::ifstream ann(fs::path(dir) / kAnnotationFile);
  if (!ann) throw std::runtime_error("no " + std::string(kAnnotationFile) + " in " + dir);
  std::vector<Frame> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ann, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const nlohmann::json rec = nlohmann::json::parse(line);
      Frame f;
      f.frame_id = rec.at("frame_id").get<std::uint64_t>();
      f.image = read_png((fs::path(dir) / rec.at("file").get<std::string>()).string());
      const auto& boxes = rec.at("boxes");
      const auto& cats = rec.at("categories");
      if (boxes.size() != cats.size()) throw std::runtime_error("boxes and categories differ in length");
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto name = cats[i].get<std::string>();
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw std::runtime_error("unknown category '" + name + "'");
        const auto b = boxes[i].get<std::vector<double>>();
        if (b.size() != 4) throw std::runtime_error("box needs 4 coordinates");
        f.objects.push_back({detector::Box{b[0], b[1], b[2], b[3]}, static_cast<std::size_t>(it - names.begin())});
      }
      out.push_back(std::move(f));
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string(kAnnotationFile) + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace wstta::sim
