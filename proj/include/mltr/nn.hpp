#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mltr/ops.hpp"
#include "mltr/rng.hpp"

namespace mltr::nn {

template <typename T>
using ParamVisitor = std::function<void(const std::string& name, ad::Tensor<T>& param)>;

template <typename T>
std::vector<T> uniform_values(std::size_t n, double bound, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

enum class Init { kXavier, kZero };

// y = x W + b with W: [in x out], b: [1 x out].
template <typename T>
struct Linear {
  ad::Tensor<T> weight;
  ad::Tensor<T> bias;

  static Linear make(std::size_t in, std::size_t out, Rng& rng, Init init = Init::kXavier) {
    Linear l;
    if (init == Init::kZero) {
      l.weight = ad::Tensor<T>::parameter({in, out}, std::vector<T>(in * out, T(0)));
    } else {
      const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
      l.weight = ad::Tensor<T>::parameter({in, out}, uniform_values<T>(in * out, bound, rng));
    }
    l.bias = ad::Tensor<T>::parameter({1, out}, std::vector<T>(out, T(0)));
    return l;
  }

  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const {
    return ad::add(ad::matmul(x, weight), bias);
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

}  // namespace mltr::nn
