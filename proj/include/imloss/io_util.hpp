#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace imloss {

/// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

/// Shortest decimal form that reads back to the same double; "nan", "inf"
/// and "-inf" for non-finite values.
std::string format_double(double value);

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits. Stable across builds.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace imloss
