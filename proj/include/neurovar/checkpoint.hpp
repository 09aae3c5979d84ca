#pragma once

#include <string>
#include <utility>
#include <vector>

#include "neurovar/tensor.hpp"

namespace nv {

// Parameter checkpoint file ("NVCK"): magic, version u32, then per-parameter
// records: name length u32, name bytes, rank u32, extents u32 each,
// little-endian float32 payload. Records run to end of file.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

// Convenience bridges to a ParamList-like sequence of named float tensors.
template <class T>
std::vector<CheckpointEntry> to_entries(
    const std::vector<std::pair<std::string, TensorT<T>>>& params) {
  std::vector<CheckpointEntry> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) {
    CheckpointEntry e;
    e.name = name;
    e.shape = t.shape();
    e.data.assign(t.data().begin(), t.data().end());
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace nv
