#pragma once

#include <array>
#include <cstdint>

#include "mltr/image.hpp"

namespace mltr::data {

struct ClaheParams {
  double clip = 2.0;
  std::size_t tiles_x = 8;
  std::size_t tiles_y = 8;
};

struct PreprocessParams {
  double gamma = 1.2;
  ClaheParams clahe;
};

// BT.601 luma, rounded. Single-channel input is copied.
ImageU8 to_grayscale(const ImageU8& img);

// Stretches to [0,255]. A constant image is returned unchanged.
ImageU8 minmax_normalize(const ImageU8& img);

// Tile histograms are clipped at max(1, floor(clip * tile_area / 256)); the
// excess is spread uniformly with the remainder going to evenly strided bins.
// Tile mappings are blended bilinearly between tile centres. Images whose
// size is not a multiple of the tile grid are padded by mirror reflection
// for histogram purposes only; as in OpenCV, both sides are then padded by
// tiles - (size % tiles), even a side that was already a multiple.
ImageU8 clahe(const ImageU8& gray, const ClaheParams& params = {});

std::array<std::uint8_t, 256> gamma_lut(double gamma);
ImageU8 apply_gamma(const ImageU8& gray, double gamma);

// grayscale -> min-max -> CLAHE -> gamma -> [0,1] float, single channel.
ImageF preprocess(const ImageU8& img, const PreprocessParams& params = {});

}  // namespace mltr::data
