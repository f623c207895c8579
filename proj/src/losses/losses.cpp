#include "mltr/losses.hpp"

namespace mltr::losses {

template <typename T>
LossTerms<T> combined_loss(const ad::Tensor<T>& logits, std::size_t label, const ad::Tensor<T>& reconstruction,
                           const ad::Tensor<T>& image, bool aux_enabled) {
  LossTerms<T> l;
  l.ce = ad::cross_entropy(logits, label);
  if (!aux_enabled) {
    l.aux = ad::Tensor<T>::scalar(T(0));
    l.total = l.ce;
    return l;
  }
  l.aux = ad::mse(reconstruction, image);
  l.total = ad::add(l.ce, l.aux);
  return l;
}

template LossTerms<float> combined_loss(const ad::Tensor<float>&, std::size_t, const ad::Tensor<float>&,
                                        const ad::Tensor<float>&, bool);
template LossTerms<double> combined_loss(const ad::Tensor<double>&, std::size_t, const ad::Tensor<double>&,
                                         const ad::Tensor<double>&, bool);

}  // namespace mltr::losses
