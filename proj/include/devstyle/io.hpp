#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace devstyle {

std::string read_file(const std::filesystem::path& path);
// Writes to <path>.tmp and renames over the destination.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);

void append_f32_le(std::string& out, std::span<const float> values);
std::vector<float> parse_f32_le(std::string_view bytes);

}  // namespace devstyle
