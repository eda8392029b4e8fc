#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "deed/model.hpp"

namespace deed {

// Layout: "DEED" | u32 version | u64 header length | UTF-8 JSON header |
// little-endian float32 blobs. The header carries the model config and one
// {name, shape, offset, nbytes} entry per parameter; offsets are relative to
// the first blob byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const MultiExitModel& model, const std::filesystem::path& path);
std::string serialize_checkpoint(const MultiExitModel& model);

// Throws ArtifactError on a malformed or truncated file.
MultiExitModel load_checkpoint(const std::filesystem::path& path);
MultiExitModel deserialize_checkpoint(const std::string& bytes);

// Reads only the config out of the header.
ModelConfig peek_checkpoint_config(const std::filesystem::path& path);

}  // namespace deed
