#pragma once

#include <string>
#include <vector>

#include "aircoop/tensor.hpp"

namespace aircoop {

// Checkpoint file layout (all integers little-endian):
//   bytes 0..7    magic "ACKP0001"
//   bytes 8..15   u64 manifest byte length
//   manifest      UTF-8 JSON: {"entries":[{"name","shape","dtype":"f64","frozen"}...]}
//   data          per entry, in manifest order: numel * 8 bytes, f64 little-endian
// Round-trips are bit-exact: values are stored as raw IEEE-754 bit patterns.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  bool frozen = false;
  std::vector<double> data;
};

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

}  // namespace aircoop
