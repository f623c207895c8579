#include "mltr/masking.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "mltr/ops.hpp"

namespace mltr::masking {
namespace {
thread_local std::size_t g_plans_created = 0;
}

std::vector<std::size_t> patch_index_map(std::size_t channels, std::size_t height, std::size_t width,
                                         std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ShapeError("patch size " + std::to_string(patch) + " does not divide image " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t gh = height / patch, gw = width / patch;
  std::vector<std::size_t> idx;
  idx.reserve(channels * height * width);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px)
            idx.push_back((c * height + gy * patch + py) * width + gx * patch + px);
  return idx;
}

template <typename T>
PatchGrid<T> patchify(const ad::Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 3) throw ShapeError("patchify expects [C x H x W], got " + to_string(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  auto idx = patch_index_map(c, h, w, patch);
  const std::size_t n = (h / patch) * (w / patch);
  PatchGrid<T> g;
  g.patch = patch;
  g.count = n;
  g.tokens = ad::gather(image, std::move(idx), {n, patch * patch * c});
  return g;
}

template <typename T>
ad::Tensor<T> unpatchify(const ad::Tensor<T>& tokens, std::size_t patch, std::size_t height,
                         std::size_t width, std::size_t channels) {
  if (tokens.numel() != height * width * channels || tokens.rank() != 2 ||
      tokens.dim(1) != patch * patch * channels) {
    throw ShapeError("unpatchify: tokens " + to_string(tokens.shape()) + " do not tile a " +
                     std::to_string(channels) + "x" + std::to_string(height) + "x" +
                     std::to_string(width) + " image with patch " + std::to_string(patch));
  }
  const auto fwd = patch_index_map(channels, height, width, patch);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return ad::gather(tokens, std::move(inv), {channels, height, width});
}

double sample_ratio(Rng& rng, double lo, double hi) {
  if (!(lo >= 0.0 && lo <= hi && hi < 1.0)) {
    throw ConfigError("masking ratio range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                      "] must satisfy 0 <= lo <= hi < 1");
  }
  return rng.uniform(lo, hi);
}

std::size_t kept_count(std::size_t n, double rho) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - rho)));
}

MaskPlan make_mask_plan(std::size_t n, double rho, Rng& rng) {
  if (n == 0) throw ConfigError("mask plan needs at least one token");
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("masking ratio " + std::to_string(rho) + " outside [0, 1)");
  MaskPlan p;
  p.rho = rho;
  p.n = n;
  p.n_kept = kept_count(n, rho);
  if (p.n_kept == 0) {
    throw ConfigError("masking ratio " + std::to_string(rho) + " leaves no tokens out of " + std::to_string(n));
  }
  p.perm.resize(n);
  std::iota(p.perm.begin(), p.perm.end(), std::size_t{0});
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i + 1));
    std::swap(p.perm[i], p.perm[j]);
  }
  p.inv_perm.resize(n);
  for (std::size_t i = 0; i < n; ++i) p.inv_perm[p.perm[i]] = i;
  p.mask.assign(n, 0);
  for (std::size_t j = 0; j < p.n_kept; ++j) p.mask[p.perm[j]] = 1;
  ++g_plans_created;
  return p;
}

std::size_t plans_created() { return g_plans_created; }
void reset_plans_created() { g_plans_created = 0; }

template <typename T>
ad::Tensor<T> gather_kept(const ad::Tensor<T>& tokens, const MaskPlan& plan) {
  if (tokens.rank() != 2 || tokens.dim(0) != plan.n) {
    throw ShapeError("gather_kept: " + to_string(tokens.shape()) + " for a plan over " +
                     std::to_string(plan.n) + " tokens");
  }
  return ad::index_select(tokens, std::span(plan.perm.data(), plan.n_kept));
}

template <typename T>
ad::Tensor<T> restore_order(const ad::Tensor<T>& full, const MaskPlan& plan) {
  if (full.rank() != 2 || full.dim(0) != plan.n) {
    throw ShapeError("restore_order: " + to_string(full.shape()) + " for a plan over " +
                     std::to_string(plan.n) + " tokens");
  }
  return ad::index_select(full, std::span<const std::size_t>(plan.inv_perm));
}

#define MLTR_INSTANTIATE_MASKING(T)                                                                 \
  template PatchGrid<T> patchify(const ad::Tensor<T>&, std::size_t);                                \
  template ad::Tensor<T> unpatchify(const ad::Tensor<T>&, std::size_t, std::size_t, std::size_t,    \
                                    std::size_t);                                                   \
  template ad::Tensor<T> gather_kept(const ad::Tensor<T>&, const MaskPlan&);                        \
  template ad::Tensor<T> restore_order(const ad::Tensor<T>&, const MaskPlan&);

MLTR_INSTANTIATE_MASKING(float)
MLTR_INSTANTIATE_MASKING(double)

}  // namespace mltr::masking
