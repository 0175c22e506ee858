#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dadrop::io {

// 8-bit interleaved RGB raster.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // width*height*3
};

void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

// Stable 64-bit FNV-1a, used to turn sample ids into rng stream keys.
std::uint64_t fnv1a64(const std::string& text);

std::string read_text(const std::filesystem::path& path);
// Writes atomically via a sibling temp file; creates parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace dadrop::io
