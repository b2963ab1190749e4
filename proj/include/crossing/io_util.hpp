#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace crossing {

// Throws DataError naming the path when the file is missing or unreadable.
std::string read_file(const std::filesystem::path& path);

// Writes to "<path>.tmp" then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace crossing
