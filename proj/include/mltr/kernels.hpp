#pragma once

#include <cstddef>

// Dense single-threaded kernels behind the autodiff ops. Reduction order is
// fixed, so results are bit-reproducible for a given build.
namespace mltr::kernels {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, padding;
  std::size_t out_h, out_w;
};

// cols: [(C*k*k) x (out_h*out_w)], zero where the window covers padding.
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols);
// Adds the column gradients back onto the image gradient.
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* image);

}  // namespace mltr::kernels
