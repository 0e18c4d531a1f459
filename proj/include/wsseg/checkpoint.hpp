#pragma once

#include <string>
#include <vector>

#include "wsseg/tensor.hpp"

namespace wsseg {

// Checkpoint layout: one UTF-8 JSON header line (meta + per-tensor name,
// shape, byte offset and count), then the raw little-endian float64 payload
// of every tensor in header order.
struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

// meta_json must be a JSON object (serialized); entries are written in order
void save_checkpoint(const std::string& path, const std::string& meta_json,
                     const std::vector<CheckpointEntry>& entries);

// returns the meta object string, fills entries
std::string load_checkpoint(const std::string& path, std::vector<CheckpointEntry>& entries);

}  // namespace wsseg
