#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "wstta/detector/model.hpp"

namespace wstta::detector {

/// Malformed checkpoint bytes. offset() is the byte position where parsing
/// stopped.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(std::size_t offset, const std::string& what)
      : std::runtime_error("checkpoint parse error at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Layout (all integers little-endian):
//   "WSTTACKP" u32 version
//   u32 n_categories { u32 len, bytes }
//   architecture: u32 image_size, u32 n_stages { u32 channels, u8 pool },
//                 u32 n_anchor_sizes { f64 }, u32 proposals, f64 nms_iou,
//                 u32 roi_grid, u32 hidden
//   u32 n_tensors { u32 name_len, name, u8 dtype(1=f64), u32 rank, u64 dims[rank], f64 values }
// BN momentum/epsilon are stored as one-element tensors "<stage>.bn.momentum"
// and "<stage>.bn.epsilon".
inline constexpr char kCheckpointMagic[8] = {'W', 'S', 'T', 'T', 'A', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_model(const DetectorModel& model);
DetectorModel deserialize_model(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const DetectorModel& model, const std::filesystem::path& path);
DetectorModel load_checkpoint(const std::filesystem::path& path);

}  // namespace wstta::detector
