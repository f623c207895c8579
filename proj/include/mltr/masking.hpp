#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mltr/rng.hpp"
#include "mltr/tensor.hpp"

// Patch bookkeeping and random masking with a random masking ratio.
//
// Patch flattening order: row k of a patch grid is the patch at grid position
// k in row-major order; within a row values are laid out channel-major, then
// by pixel row, then pixel column: (c, py, px).
namespace mltr::masking {

template <typename T>
struct PatchGrid {
  std::size_t patch = 0;  // P
  std::size_t count = 0;  // N
  ad::Tensor<T> tokens;   // [N x (P*P*C)]
};

// For each element of the [N x P*P*C] token matrix, the flat index into the
// [C x H x W] image it is copied from.
std::vector<std::size_t> patch_index_map(std::size_t channels, std::size_t height, std::size_t width,
                                         std::size_t patch);

template <typename T>
PatchGrid<T> patchify(const ad::Tensor<T>& image, std::size_t patch);

template <typename T>
ad::Tensor<T> unpatchify(const ad::Tensor<T>& tokens, std::size_t patch, std::size_t height,
                         std::size_t width, std::size_t channels);

// Uniform ratio in [lo, hi].
double sample_ratio(Rng& rng, double lo = 0.3, double hi = 0.8);

// Number of tokens surviving masking: floor(N * (1 - rho)).
std::size_t kept_count(std::size_t n, double rho);

struct MaskPlan {
  double rho = 0;
  std::size_t n = 0;
  std::size_t n_kept = 0;
  std::vector<std::size_t> perm;      // shuffled order; the first n_kept are kept
  std::vector<std::size_t> inv_perm;  // inv_perm[perm[i]] == i
  std::vector<std::uint8_t> mask;     // 1 = unmasked (kept), 0 = masked
};

MaskPlan make_mask_plan(std::size_t n, double rho, Rng& rng);

// Instrumentation: number of MaskPlans built on this thread.
std::size_t plans_created();
void reset_plans_created();

// Rows perm[0..n_kept) of a [N x D] token matrix.
template <typename T>
ad::Tensor<T> gather_kept(const ad::Tensor<T>& tokens, const MaskPlan& plan);

// `full` holds the kept tokens in shuffled order followed by N - n_kept mask
// rows. Returns the rows in original order (gather by inv_perm).
template <typename T>
ad::Tensor<T> restore_order(const ad::Tensor<T>& full, const MaskPlan& plan);

}  // namespace mltr::masking
