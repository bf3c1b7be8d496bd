#include "png_io.hpp"

#include <png.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "pvseg/errors.hpp"

namespace pvseg::detail {

namespace {

png_uint_32 format_for(int channels) {
  return channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
}

Image8 finish_read(png_image& img, int channels, const std::string& origin) {
  img.format = format_for(channels);
  Image8 out;
  out.height = static_cast<int>(img.height);
  out.width = static_cast<int>(img.width);
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DatasetError("cannot decode png: " + msg, origin);
  }
  return out;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image8& image) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = format_for(image.channels);
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw DatasetError(std::string("cannot write png: ") + img.message, path.string());
  }
}

Image8 read_png(const std::filesystem::path& path, int channels) {
  if (!std::filesystem::exists(path)) {
    throw DatasetError("missing file: " + path.string(), path.string());
  }
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DatasetError(std::string("cannot read png: ") + img.message, path.string());
  }
  return finish_read(img, channels, path.string());
}

Image8 decode_png(const std::vector<std::uint8_t>& bytes, int channels) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw ValidationError(std::string("cannot decode png: ") + img.message, "frames");
  }
  try {
    return finish_read(img, channels, "<memory>");
  } catch (const DatasetError& e) {
    throw ValidationError(e.what(), "frames");
  }
}

std::vector<std::uint8_t> encode_png(const Image8& image) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = format_for(image.channels);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("cannot encode png: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("cannot encode png: ") + img.message);
  }
  out.resize(size);
  return out;
}

}  // namespace pvseg::detail
