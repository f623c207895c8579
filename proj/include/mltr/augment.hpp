#pragma once

#include <vector>

#include "mltr/image.hpp"
#include "mltr/rng.hpp"

namespace mltr::data {

struct AugmentOps {
  bool blur = true;
  bool hflip = true;
  bool vflip = true;
  bool shift = true;
  bool scale = true;
  bool rot90 = true;

  static AugmentOps none() { return {false, false, false, false, false, false}; }
};

ImageF flip_horizontal(const ImageF& img);
ImageF flip_vertical(const ImageF& img);
// Quarter turns counter-clockwise; odd turns swap width and height.
ImageF rotate90(const ImageF& img, int quarter_turns = 1);
ImageF gaussian_blur(const ImageF& img, double sigma);
// Integer translation, vacated pixels replicate the nearest edge.
ImageF translate(const ImageF& img, long dx, long dy);
// Zoom about the centre with bilinear sampling and edge clamping.
ImageF zoom(const ImageF& img, double factor);

// Returns `multiplier` images; the first is the input, each further one is a
// random composition of the enabled ops (each applied with probability 1/2,
// parameters drawn from the documented ranges).
std::vector<ImageF> augment(const ImageF& img, Rng& rng, const AugmentOps& ops, std::size_t multiplier = 64);

}  // namespace mltr::data
