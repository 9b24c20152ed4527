#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rba/tensor.hpp"

namespace rba {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Versioned binary container of named tensors. Layout after the 8-byte
// magic "RBACKPT1": u64 entry count, then per entry u32 name length, name
// bytes, u32 rank, i32 extents, raw f64 values; a trailing u64 FNV-1a hash
// covers everything between magic and hash, so any corrupted byte fails
// the load instead of producing silently wrong numbers.
void save_checkpoint(const std::filesystem::path& path,
                     const NamedTensors& params);

NamedTensors load_checkpoint(const std::filesystem::path& path);

// Copies loaded values into the model's tensors; names and shapes must
// match exactly in both directions.
void apply_checkpoint(NamedTensors& params, const NamedTensors& loaded);

}  // namespace rba
