#include "mltr/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "mltr/error.hpp"

namespace mltr::data {
namespace {

class HeaderParser {
 public:
  explicit HeaderParser(std::span<const std::uint8_t> b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    if (pos_ >= b_.size()) throw FormatError(std::string("PNM header: missing ") + what + " at byte " + std::to_string(pos_));
    if (!std::isdigit(b_[pos_])) {
      throw FormatError(std::string("PNM header: expected ") + what + " at byte " + std::to_string(pos_));
    }
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > (1u << 24)) throw FormatError(std::string("PNM header: ") + what + " too large at byte " + std::to_string(start));
      ++pos_;
    }
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance() { ++pos_; }
  bool at_space() const { return pos_ < b_.size() && std::isspace(b_[pos_]); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

ImageU8 decode_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("PNM header: expected magic P5 or P6 at byte 0");
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  HeaderParser p(bytes);
  p.advance();
  p.advance();
  if (!p.at_space() && !(p.pos() < bytes.size() && bytes[p.pos()] == '#')) {
    throw FormatError("PNM header: expected whitespace after magic at byte 2");
  }
  const std::size_t width = p.number("width");
  const std::size_t height = p.number("height");
  const std::size_t maxval_pos = p.pos();
  const std::size_t maxval = p.number("maxval");
  if (width == 0 || height == 0) throw FormatError("PNM header: zero image dimension before byte " + std::to_string(maxval_pos));
  if (maxval != 255) {
    throw FormatError("PNM header: unsupported maxval " + std::to_string(maxval) + " at byte " +
                      std::to_string(maxval_pos + 1) + " (only 255)");
  }
  if (!p.at_space()) throw FormatError("PNM header: expected single whitespace before raster at byte " + std::to_string(p.pos()));
  p.advance();
  const std::size_t need = width * height * channels;
  if (bytes.size() - p.pos() < need) {
    throw FormatError("PNM raster truncated at byte " + std::to_string(bytes.size()) + ": need " + std::to_string(need) +
                      " bytes from byte " + std::to_string(p.pos()));
  }
  ImageU8 img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(p.pos()),
                    bytes.begin() + static_cast<std::ptrdiff_t>(p.pos() + need));
  return img;
}

std::vector<std::uint8_t> encode_pnm(const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError("PNM supports 1 or 3 channels, got " + std::to_string(img.channels));
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

ImageU8 read_pnm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_pnm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_pnm(const ImageU8& img, const std::filesystem::path& path) {
  const auto bytes = encode_pnm(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

ImageU8 resize_bilinear(const ImageU8& img, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw ShapeError("resize to an empty image");
  if (img.width == width && img.height == height) return img;
  ImageU8 out(width, height, img.channels);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  const auto max_x = static_cast<double>(img.width - 1), max_y = static_cast<double>(img.height - 1);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(x0, y0, c) * (1 - wx) + img.at(x1, y0, c) * wx;
        const double bot = img.at(x0, y1, c) * (1 - wx) + img.at(x1, y1, c) * wx;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(top * (1 - wy) + bot * wy), 0L, 255L));
      }
    }
  }
  return out;
}

ImageU8 read_image(const std::filesystem::path& path, std::size_t width, std::size_t height) {
  return resize_bilinear(read_pnm(path), width, height);
}

ImageF to_float(const ImageU8& img) {
  ImageF out(img.width, img.height, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(x, y, c) = static_cast<float>(img.at(x, y, c)) / 255.0f;
  return out;
}

ImageU8 to_u8(const ImageF& img) {
  ImageU8 out(img.width, img.height, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(img.at(x, y, c) * 255.0f), 0L, 255L));
  return out;
}

}  // namespace mltr::data
