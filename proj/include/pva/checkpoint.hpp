#pragma once

#include <filesystem>

#include "pva/network.hpp"

namespace pva {

// Checkpoint container, little-endian: magic "PVAM", version u32 (=1),
// config digest u64, config block (u32 length + canonical config text),
// then one record per parameter in registry order:
//   name length u32, name bytes, rank u32, dims u32 x rank, f64 payload.
// The config block lets eval and inference rebuild the model without the
// training flags; the digest guards it.

void save_checkpoint(const std::filesystem::path& path, const PvaModel& model);

// Rebuilds the model from the embedded config and loads every tensor.
PvaModel load_checkpoint(const std::filesystem::path& path);

// Loads into a caller-supplied configuration; throws FormatError when the
// checkpoint was written under a different one.
PvaModel load_checkpoint(const std::filesystem::path& path, const PvaConfig& expected);

}  // namespace pva
