#include "mltr/augment.hpp"

#include <algorithm>
#include <cmath>

#include "mltr/error.hpp"

namespace mltr::data {

ImageF flip_horizontal(const ImageF& img) {
  ImageF out(img.width, img.height, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  return out;
}

ImageF flip_vertical(const ImageF& img) {
  ImageF out(img.width, img.height, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(x, y, c) = img.at(x, img.height - 1 - y, c);
  return out;
}

ImageF rotate90(const ImageF& img, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return img;
  if (k == 2) return flip_vertical(flip_horizontal(img));
  ImageF out(img.height, img.width, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < out.height; ++y) {
      for (std::size_t x = 0; x < out.width; ++x) {
        // counter-clockwise: out(x, y) = in(W-1-y, x)
        out.at(x, y, c) = k == 1 ? img.at(img.width - 1 - y, x, c) : img.at(y, img.height - 1 - x, c);
      }
    }
  }
  return out;
}

ImageF gaussian_blur(const ImageF& img, double sigma) {
  if (!(sigma > 0)) return img;
  const auto radius = static_cast<long>(std::ceil(3 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (long i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (auto& w : kernel) w /= total;
  const auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(n) - 1)); };
  ImageF tmp(img.width, img.height, img.channels), out(img.width, img.height, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        double acc = 0;
        for (long i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] * img.at(clampi(static_cast<long>(x) + i, img.width), y, c);
        tmp.at(x, y, c) = static_cast<float>(acc);
      }
    }
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        double acc = 0;
        for (long i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(x, clampi(static_cast<long>(y) + i, img.height), c);
        out.at(x, y, c) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

ImageF translate(const ImageF& img, long dx, long dy) {
  ImageF out(img.width, img.height, img.channels);
  const auto w = static_cast<long>(img.width), h = static_cast<long>(img.height);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) =
            img.at(static_cast<std::size_t>(std::clamp(x - dx, 0L, w - 1)), static_cast<std::size_t>(std::clamp(y - dy, 0L, h - 1)), c);
  return out;
}

ImageF zoom(const ImageF& img, double factor) {
  if (!(factor > 0)) throw ConfigError("zoom factor must be positive");
  ImageF out(img.width, img.height, img.channels);
  const double cx = (static_cast<double>(img.width) - 1) / 2, cy = (static_cast<double>(img.height) - 1) / 2;
  const double max_x = static_cast<double>(img.width - 1), max_y = static_cast<double>(img.height - 1);
  for (std::size_t y = 0; y < img.height; ++y) {
    const double fy = std::clamp(cy + (static_cast<double>(y) - cy) / factor, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < img.width; ++x) {
      const double fx = std::clamp(cx + (static_cast<double>(x) - cx) / factor, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(x0, y0, c) * (1 - wx) + img.at(x1, y0, c) * wx;
        const double bot = img.at(x0, y1, c) * (1 - wx) + img.at(x1, y1, c) * wx;
        out.at(x, y, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

std::vector<ImageF> augment(const ImageF& img, Rng& rng, const AugmentOps& ops, std::size_t multiplier) {
  if (multiplier == 0) throw ConfigError("augmentation multiplier must be at least 1");
  std::vector<ImageF> out;
  out.reserve(multiplier);
  out.push_back(img);
  const bool square = img.width == img.height;
  for (std::size_t i = 1; i < multiplier; ++i) {
    ImageF a = img;
    if (ops.blur && rng.bernoulli(0.5)) a = gaussian_blur(a, rng.uniform(0.5, 1.5));
    if (ops.hflip && rng.bernoulli(0.5)) a = flip_horizontal(a);
    if (ops.vflip && rng.bernoulli(0.5)) a = flip_vertical(a);
    if (ops.shift && rng.bernoulli(0.5)) {
      const auto dx = std::lround(rng.uniform(-0.1, 0.1) * static_cast<double>(a.width));
      const auto dy = std::lround(rng.uniform(-0.1, 0.1) * static_cast<double>(a.height));
      a = translate(a, dx, dy);
    }
    if (ops.scale && rng.bernoulli(0.5)) a = zoom(a, rng.uniform(0.9, 1.1));
    if (ops.rot90 && rng.bernoulli(0.5)) {
      const auto turns = static_cast<int>(rng.below(4));
      a = rotate90(a, square ? turns : (turns & 2));
    }
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace mltr::data
