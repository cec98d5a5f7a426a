#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "swinlab/model.hpp"
#include "swinlab/tensor.hpp"

namespace swinlab {

struct ArchiveEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const ArchiveEntry&) const = default;
};

/// Named-tensor archive. On disk: "SWL2", u32 version, u32 count, then per
/// tensor u16 name length, name bytes, u8 rank, u64 extents, f64 payload;
/// little-endian throughout.
struct Checkpoint {
  std::vector<ArchiveEntry> entries;

  const ArchiveEntry* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint snapshot(const NamedTensors& params);
Checkpoint snapshot(const Model& model);

/// Copies values into the model's parameters. Names and shapes must match
/// exactly.
void restore(Model& model, const Checkpoint& ckpt);

}  // namespace swinlab
