#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace vinpaint::io {

std::string read_file(const std::filesystem::path& path);

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace vinpaint::io
