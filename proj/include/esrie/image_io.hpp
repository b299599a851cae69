#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "esrie/image.hpp"

namespace esrie {

/// Display8 images are written as binary PGM (P5, maxval 255) with one
/// comment line `# dx=<mm> dz=<mm>`. Linear and dB images use the raw
/// little-endian format:
///
///   "ESRI1" | u32 width | u32 height | u8 domain | f32 dx | f32 dz | f32 data[w*h]
void write_image(const Image& img, const std::filesystem::path& path);

/// Detects the format from the leading magic bytes.
Image read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_image(const Image& img);
Image decode_image(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace esrie
