#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mltr/tensor.hpp"

// Central finite-difference checks of reverse-mode gradients in double
// precision.
namespace mltr::gradcheck {

struct Result {
  std::string name;
  // max over inputs of |analytic - numeric|_2 / max(|analytic|_2 + |numeric|_2, floor)
  // with floor = 1e-6 * (largest numeric input-gradient norm)
  double rel_error = 0;
  double max_abs_error = 0;
  std::size_t checked = 0;  // number of perturbed scalars
  bool passed = false;
};

using ScalarFn = std::function<ad::Tensor<double>()>;

// `fn` must read `inputs` through shared handles so that perturbing their
// storage changes its value. Every element of every input is perturbed by
// +-h.
Result check(const std::string& name, const ScalarFn& fn, const std::vector<ad::Tensor<double>>& inputs,
             double h = 1e-5, double tol = 1e-4);

// One check per differentiable op, plus the composite attention, block and
// patch operations.
std::vector<Result> op_suite(std::uint64_t seed, double tol = 1e-4);

// Full training loss of a tiny model (D=8, one encoder and one decoder
// block, 4 patches) with every parameter checked. Zero-initialized
// modulation weights are randomized first so gradients reach every path.
Result model_check(std::uint64_t seed, double tol = 1e-3);

}  // namespace mltr::gradcheck
