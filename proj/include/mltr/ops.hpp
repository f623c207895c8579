#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mltr/tape.hpp"
#include "mltr/tensor.hpp"

// Differentiable tensor operations. Every op records a backward closure on
// the active GradTape when at least one input requires a gradient.
//
// Broadcasting (add, sub, mul): only the second operand broadcasts, and only
// when it is a single element or when its shape, with leading 1-sized axes
// removed, equals the trailing axes of the first operand. A [1xD] row thus
// broadcasts over an [LxD] matrix; a column [Lx1] does not.
namespace mltr::ad {

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a * b^T without materializing the transpose.
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
// Mean of squared differences; shapes must match exactly.
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);
// Normalizes over the last axis; no affine parameters.
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, T eps);
// Exact erf form.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

// x: [Cin x H x W], w: [Cout x Cin x k x k], bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);
// [C x H x W] -> [C x 1 x 1] channel means.
template <typename T> Tensor<T> adaptive_avg_pool(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Row gather on a matrix: out[i] = x[idx[i]].
template <typename T> Tensor<T> index_select(const Tensor<T>& x, std::span<const std::size_t> idx);
// Flat gather: out.flat[i] = x.flat[idx[i]], reshaped to `shape`.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::size_t> idx, Shape shape);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
// Repeats a [1 x D] row n times.
template <typename T> Tensor<T> broadcast_rows(const Tensor<T>& row, std::size_t n);
// out[i] = keep[i] ? a[i] : b[i], row-wise. Copies rows, so selected rows are
// bit-identical to their source.
template <typename T>
Tensor<T> select_rows(std::span<const std::uint8_t> keep, const Tensor<T>& a, const Tensor<T>& b);

// Log-softmax + negative log likelihood for a single sample.
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t target);

}  // namespace mltr::ad
