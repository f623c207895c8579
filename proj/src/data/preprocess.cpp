#include "mltr/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "mltr/error.hpp"

namespace mltr::data {
namespace {

std::uint8_t saturate(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// Single precision with ties to even, as the reference CLAHE rounds.
std::uint8_t saturate_even(float v) { return static_cast<std::uint8_t>(std::clamp(std::lrint(v), 0L, 255L)); }

// Mirror without repeating the edge pixel; falls back to clamping for
// extents too small to reflect.
std::size_t reflect101(std::size_t i, std::size_t n) {
  if (i < n) return i;
  if (n == 1) return 0;
  const std::size_t r = 2 * (n - 1) - i;
  return r < n ? r : n - 1;
}

}  // namespace

ImageU8 to_grayscale(const ImageU8& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw ShapeError("grayscale expects 1 or 3 channels, got " + std::to_string(img.channels));
  ImageU8 out(img.width, img.height, 1);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      out.at(x, y) = saturate(0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2));
  return out;
}

ImageU8 minmax_normalize(const ImageU8& img) {
  const auto [lo_it, hi_it] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  if (lo_it == img.pixels.end() || *lo_it == *hi_it) return img;
  const double lo = *lo_it, range = static_cast<double>(*hi_it) - lo;
  ImageU8 out = img;
  for (auto& p : out.pixels) p = saturate((p - lo) * 255.0 / range);
  return out;
}

ImageU8 clahe(const ImageU8& gray, const ClaheParams& params) {
  if (gray.channels != 1) throw ShapeError("CLAHE expects a single-channel image");
  if (params.tiles_x == 0 || params.tiles_y == 0) throw ConfigError("CLAHE tile grid must be non-empty");
  if (gray.pixels.empty()) return gray;
  const std::size_t tx = params.tiles_x, ty = params.tiles_y;
  // When either side needs padding, both sides are padded by tiles - (size % tiles),
  // so a side that already divides evenly gains one extra tile's worth.
  std::size_t pw = gray.width, ph = gray.height;
  if (pw % tx != 0 || ph % ty != 0) {
    pw += tx - pw % tx;
    ph += ty - ph % ty;
  }
  const std::size_t tw = pw / tx, th = ph / ty;
  const std::size_t area = tw * th;

  int limit = 0;
  if (params.clip > 0) limit = std::max(1, static_cast<int>(params.clip * static_cast<double>(area) / 256.0));

  std::vector<std::array<std::uint8_t, 256>> luts(tx * ty);
  const float lut_scale = 255.0f / static_cast<float>(area);
  for (std::size_t by = 0; by < ty; ++by) {
    for (std::size_t bx = 0; bx < tx; ++bx) {
      std::array<int, 256> hist{};
      for (std::size_t y = by * th; y < (by + 1) * th; ++y)
        for (std::size_t x = bx * tw; x < (bx + 1) * tw; ++x)
          ++hist[gray.at(reflect101(x, gray.width), reflect101(y, gray.height))];
      if (limit > 0) {
        int clipped = 0;
        for (auto& h : hist) {
          if (h > limit) {
            clipped += h - limit;
            h = limit;
          }
        }
        const int batch = clipped / 256;
        int residual = clipped - batch * 256;
        for (auto& h : hist) h += batch;
        if (residual > 0) {
          const int step = std::max(256 / residual, 1);
          for (int i = 0; i < 256 && residual > 0; i += step, --residual) ++hist[static_cast<std::size_t>(i)];
        }
      }
      auto& lut = luts[by * tx + bx];
      long cdf = 0;
      for (std::size_t i = 0; i < 256; ++i) {
        cdf += hist[i];
        lut[i] = saturate_even(static_cast<float>(cdf) * lut_scale);
      }
    }
  }

  ImageU8 out(gray.width, gray.height, 1);
  const float inv_th = 1.0f / static_cast<float>(th), inv_tw = 1.0f / static_cast<float>(tw);
  const auto last_x = static_cast<long>(tx) - 1, last_y = static_cast<long>(ty) - 1;
  for (std::size_t y = 0; y < gray.height; ++y) {
    const float fy = static_cast<float>(y) * inv_th - 0.5f;
    const long y1 = static_cast<long>(std::floor(fy));
    const float wy = fy - static_cast<float>(y1);
    const auto r0 = static_cast<std::size_t>(std::max(y1, 0L)), r1 = static_cast<std::size_t>(std::min(y1 + 1, last_y));
    for (std::size_t x = 0; x < gray.width; ++x) {
      const float fx = static_cast<float>(x) * inv_tw - 0.5f;
      const long x1 = static_cast<long>(std::floor(fx));
      const float wx = fx - static_cast<float>(x1);
      const auto c0 = static_cast<std::size_t>(std::max(x1, 0L)), c1 = static_cast<std::size_t>(std::min(x1 + 1, last_x));
      const std::uint8_t v = gray.at(x, y);
      const float top = luts[r0 * tx + c0][v] * (1.0f - wx) + luts[r0 * tx + c1][v] * wx;
      const float bot = luts[r1 * tx + c0][v] * (1.0f - wx) + luts[r1 * tx + c1][v] * wx;
      out.at(x, y) = saturate_even(top * (1.0f - wy) + bot * wy);
    }
  }
  return out;
}

std::array<std::uint8_t, 256> gamma_lut(double gamma) {
  if (!(gamma > 0)) throw ConfigError("gamma must be positive");
  std::array<std::uint8_t, 256> lut{};
  for (std::size_t i = 0; i < 256; ++i) lut[i] = saturate(255.0 * std::pow(static_cast<double>(i) / 255.0, gamma));
  return lut;
}

ImageU8 apply_gamma(const ImageU8& gray, double gamma) {
  const auto lut = gamma_lut(gamma);
  ImageU8 out = gray;
  for (auto& p : out.pixels) p = lut[p];
  return out;
}

ImageF preprocess(const ImageU8& img, const PreprocessParams& params) {
  return to_float(apply_gamma(clahe(minmax_normalize(to_grayscale(img)), params.clahe), params.gamma));
}

}  // namespace mltr::data
