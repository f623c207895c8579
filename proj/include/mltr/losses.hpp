#pragma once

#include "mltr/ops.hpp"

namespace mltr::losses {

template <typename T>
struct LossTerms {
  ad::Tensor<T> total;
  ad::Tensor<T> ce;
  ad::Tensor<T> aux;  // mean squared reconstruction error; zero when disabled
};

// total = CE(logits, label) + mean((reconstruction - image)^2), the second
// term only when `aux_enabled`.
template <typename T>
LossTerms<T> combined_loss(const ad::Tensor<T>& logits, std::size_t label, const ad::Tensor<T>& reconstruction,
                           const ad::Tensor<T>& image, bool aux_enabled);

}  // namespace mltr::losses
