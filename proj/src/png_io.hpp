#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace pvseg::detail {

struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

void write_png(const std::filesystem::path& path, const Image8& image);

/// Reads and converts to the requested channel count (1 = gray, 3 = RGB).
/// Throws DatasetError on missing or undecodable files.
Image8 read_png(const std::filesystem::path& path, int channels);

Image8 decode_png(const std::vector<std::uint8_t>& bytes, int channels);
std::vector<std::uint8_t> encode_png(const Image8& image);

}  // namespace pvseg::detail
