#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wstta/nn/tensor.hpp"
#include "wstta/sim/scene.hpp"

namespace wstta::sim {

/// 8-bit RGB PNG of a [3,H,W] image in [0,1] (rounded to nearest).
std::vector<std::uint8_t> encode_png(const nn::Tensor& image);
/// Decodes an 8-bit RGB/RGBA/gray PNG into [3,H,W] values in [0,1].
nn::Tensor decode_png(const std::vector<std::uint8_t>& bytes);

void write_png(const std::string& path, const nn::Tensor& image);
nn::Tensor read_png(const std::string& path);

inline constexpr const char* kAnnotationFile = "annotations.ndjson";

/// Writes one PNG per frame plus annotations.ndjson with one record per
/// frame: {"frame_id", "file", "boxes": [[x1,y1,x2,y2],...], "categories": [names]}.
void export_frames(const std::string& dir, const std::vector<Frame>& frames,
                   const std::vector<std::string>& category_names);

/// Reads a directory written by export_frames. Pixels come back quantised
/// to 8 bits.
std::vector<Frame> import_frames(const std::string& dir, const std::vector<std::string>& category_names);

}  // namespace wstta::sim
