#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mapmatch/model/transformer.hpp"

namespace mapmatch::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary container: magic "MMTC", u32 version, u64 header length, header
/// JSON (format, version, model config), u64 tensor count, then per tensor
/// u32 name length, name bytes, u32 rank, u64 dims[rank], u8 component tag,
/// float32 data in row-major order. All integers and floats little-endian.
std::string encode_checkpoint(const Transformer<float>& model);
Transformer<float> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Transformer<float>& model, const std::filesystem::path& path);
/// Throws VersionError on a bad header, version or shape mismatch.
Transformer<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace mapmatch::model
