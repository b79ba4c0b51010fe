#pragma once

// "CKPT1" checkpoint files:
//
//   5 bytes   magic "CKPT1"
//   u64 LE    header length in bytes
//   header    UTF-8 JSON array [{name, dtype:"f32", shape:[...], offset, nbytes}], sorted by name
//   payload   raw little-endian tensor data; offsets are relative to the payload start

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "vinpaint/tensor.hpp"

namespace vinpaint::ckpt {

/// Named f32 tensors, ordered by name.
using Checkpoint = std::map<std::string, TensorF>;

inline constexpr std::string_view kMagic = "CKPT1";

std::string encode_checkpoint(const Checkpoint& ckpt);

/// Throws FormatError naming the offending field on any malformed input.
Checkpoint decode_checkpoint(std::string_view bytes);

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Throws IoError when the file cannot be read, FormatError when it is malformed.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace vinpaint::ckpt
