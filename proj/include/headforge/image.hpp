// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "headforge/error.hpp"

namespace headforge {

/// Row-major H x W x C float image, row 0 at the top.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(int row, int col, int ch = 0) const {
    return (static_cast<std::size_t>(row) * width + col) * channels + ch;
  }
  float& at(int row, int col, int ch = 0) { return data[index(row, col, ch)]; }
  float at(int row, int col, int ch = 0) const { return data[index(row, col, ch)]; }

  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                     std::to_string(b.channels) + ")");
  }
}

inline double mean_squared_error(const Image& a, const Image& b) {
  require_same_shape(a, b, "mean_squared_error");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return a.size() ? acc / double(a.size()) : 0.0;
}

inline double mean_abs_error(const Image& a, const Image& b) {
  require_same_shape(a, b, "mean_abs_error");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(double(a.data[i]) - b.data[i]);
  return a.size() ? acc / double(a.size()) : 0.0;
}

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

/// 8-bit PNG encoding; values are clamped to [0,1] and rounded.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ShapeError("encode_png: need 1 or 3 channels");
  std::vector<std::uint8_t> pixels(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const float v = std::clamp(img.data[i], 0.0f, 1.0f);
    pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t bytes = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &bytes, 0, pixels.data(), 0, nullptr))
    throw IoError(std::string("encode_png: ") + pi.message);
  std::vector<std::uint8_t> out(bytes);
  if (!png_image_write_to_memory(&pi, out.data(), &bytes, 0, pixels.data(), 0, nullptr))
    throw IoError(std::string("encode_png: ") + pi.message);
  out.resize(bytes);
  return out;
}

inline Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
    throw ParseError(std::string("decode_png: ") + pi.message, 0);
  pi.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, pixels.data(), 0, nullptr))
    throw ParseError(std::string("decode_png: ") + pi.message, 0);
  Image img(static_cast<int>(pi.height), static_cast<int>(pi.width), 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) img.data[i] = pixels[i] / 255.0f;
  return img;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  write_bytes(path, encode_png(img));
}

}  // namespace headforge
