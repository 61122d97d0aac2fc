#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pyramidseg/network.hpp"

namespace pyseg {

// Binary layout, all integers little-endian:
//   "DPYR" | u32 version | u32 entry count |
//   entries: u32 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 payload
// The network configuration is stored as rank-0 entries under "meta.".
inline constexpr char kCheckpointMagic[4] = {'D', 'P', 'Y', 'R'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

std::vector<uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
// Throws kBadMagic, kBadVersion, kTruncated or kDuplicateName.
std::vector<CheckpointEntry> decode_checkpoint(std::span<const uint8_t> bytes);

std::vector<CheckpointEntry> checkpoint_entries(const SegmentationNet<float>& net);

void save_checkpoint(const std::string& path, const SegmentationNet<float>& net);
std::unique_ptr<SegmentationNet<float>> load_checkpoint(const std::string& path);
// Rebuilds a network from decoded entries; missing or unknown tensors are
// kMalformed.
std::unique_ptr<SegmentationNet<float>> network_from_entries(const std::vector<CheckpointEntry>& entries);

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes);

}  // namespace pyseg
