#include "neurovar/checkpoint.hpp"

#include "neurovar/binio.hpp"

namespace nv {

namespace {
constexpr char kMagic[4] = {'N', 'V', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  BinWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  for (const auto& e : entries) {
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (std::int64_t d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    w.f32_array(e.data.data(), e.data.size());
  }
  w.close();
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  BinReader r(path);
  if (!r.expect_magic(kMagic)) throw Error("not a checkpoint file: " + path);
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw Error("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  std::vector<CheckpointEntry> entries;
  while (!r.at_eof()) {
    CheckpointEntry e;
    e.name = r.str();
    const std::uint32_t rank = r.u32();
    e.shape.resize(rank);
    std::int64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      e.shape[i] = static_cast<std::int64_t>(r.u32());
      n *= e.shape[i];
    }
    e.data.resize(static_cast<std::size_t>(n));
    r.f32_array(e.data.data(), e.data.size());
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace nv
