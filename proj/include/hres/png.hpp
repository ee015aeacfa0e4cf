#pragma once

// Minimal PNG codec over libpng's simplified API. Only 8-bit RGB without
// alpha is accepted on read; anything else is rejected by name.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hres/imageproc.hpp"

namespace hres {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string png_format_name(png_uint_32 format) {
  if (format & PNG_FORMAT_FLAG_COLORMAP) return "palette";
  if (format & PNG_FORMAT_FLAG_LINEAR) return "16-bit";
  const bool color = format & PNG_FORMAT_FLAG_COLOR;
  const bool alpha = format & PNG_FORMAT_FLAG_ALPHA;
  if (!color) return alpha ? "grey+alpha" : "greyscale";
  return alpha ? "RGBA" : "RGB";
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

/// Writes via a sibling temp file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string());
  }
}

inline void encode_png(const std::filesystem::path& path, std::size_t w, std::size_t h, png_uint_32 format,
                       const std::vector<std::uint8_t>& pixels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError("png encode failed for " + path.string() + ": " + img.message);
  }
  std::vector<std::uint8_t> buf(size);
  if (!png_image_write_to_memory(&img, buf.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError("png encode failed for " + path.string() + ": " + img.message);
  }
  write_file_atomic(path, buf.data(), size);
}

}  // namespace detail

inline RgbPatch read_png(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  if (img.format != PNG_FORMAT_RGB) {
    const std::string name = detail::png_format_name(img.format);
    png_image_free(&img);
    throw IoError("unsupported PNG format in " + path.string() + ": " + name + " (expected 8-bit RGB)");
  }
  if (img.width == 0 || img.height == 0) {
    png_image_free(&img);
    throw IoError("empty PNG " + path.string());
  }
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return RgbPatch(img.width, img.height, std::move(px));
}

inline void write_png(const std::filesystem::path& path, const RgbPatch& patch) {
  detail::encode_png(path, patch.width, patch.height, PNG_FORMAT_RGB, patch.pixels);
}

inline void write_png_gray(const std::filesystem::path& path, std::size_t width, std::size_t height,
                           const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) throw std::invalid_argument("write_png_gray: pixel count mismatch");
  detail::encode_png(path, width, height, PNG_FORMAT_GRAY, pixels);
}

}  // namespace hres
