#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace mltr::data {

// 8-bit image, interleaved (row-major, channels innermost).
struct ImageU8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const ImageU8&) const = default;
};

// Unit-interval float image, planar [C x H x W] to match model tensors.
struct ImageF {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<float> data;

  ImageF() = default;
  ImageF(std::size_t w, std::size_t h, std::size_t c, float fill = 0.f)
      : width(w), height(h), channels(c), data(w * h * c, fill) {}

  float& at(std::size_t x, std::size_t y, std::size_t c = 0) { return data[(c * height + y) * width + x]; }
  float at(std::size_t x, std::size_t y, std::size_t c = 0) const { return data[(c * height + y) * width + x]; }
  bool operator==(const ImageF&) const = default;
};

// Binary PGM (P5) and PPM (P6) with maxval 255. Errors are FormatError with
// the byte offset of the offending header token.
ImageU8 decode_pnm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pnm(const ImageU8& img);

ImageU8 read_pnm(const std::filesystem::path& path);
void write_pnm(const ImageU8& img, const std::filesystem::path& path);

// Bilinear resampling with pixel-center alignment and edge clamping.
ImageU8 resize_bilinear(const ImageU8& img, std::size_t width, std::size_t height);

// Decodes and, when the size differs, resizes to width x height.
ImageU8 read_image(const std::filesystem::path& path, std::size_t width, std::size_t height);

ImageF to_float(const ImageU8& img);
ImageU8 to_u8(const ImageF& img);

}  // namespace mltr::data
