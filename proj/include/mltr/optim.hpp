#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mltr/tensor.hpp"

namespace mltr::optim {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam with decoupled weight decay, optionally wrapped in
// Lookahead (slow weights pulled toward the fast ones every k steps).
// Frozen parameters (requires_grad == false) are never registered.
template <typename T>
class Adam {
 public:
  struct Slot {
    std::string name;
    ad::Tensor<T> param;
    std::vector<T> m, v;
    std::vector<T> slow;  // lookahead only
  };

  Adam() = default;
  explicit Adam(AdamHyper hyper) : hyper_(hyper) {}

  // Registers every visited parameter that requires a gradient.
  template <typename Visitable>
  void attach(Visitable& params) {
    slots_.clear();
    params.visit_params([&](const std::string& name, ad::Tensor<T>& p) {
      if (!p.requires_grad()) return;
      slots_.push_back({name, p, std::vector<T>(p.numel(), T(0)), std::vector<T>(p.numel(), T(0)), {}});
    });
    if (lookahead_k_) init_slow();
  }

  void enable_lookahead(std::size_t k, double alpha);

  // One update using each parameter's current grad (absent grad counts as zero).
  void step(double lr, double weight_decay);

  // Lookahead: every k steps, slow += alpha * (fast - slow); fast = slow.
  // Called by step(); exposed for tests. Returns true when a sync happened.
  bool lookahead_sync();

  std::uint64_t step_count() const { return steps_; }
  const std::vector<Slot>& slots() const { return slots_; }
  std::vector<Slot>& slots() { return slots_; }
  bool tracks(const std::string& name) const;
  void set_step_count(std::uint64_t s) { steps_ = s; }

 private:
  void init_slow();

  AdamHyper hyper_;
  std::vector<Slot> slots_;
  std::uint64_t steps_ = 0;
  std::size_t lookahead_k_ = 0;
  double lookahead_alpha_ = 0.5;
};

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2; steps past
// `total` clamp to lr_min.
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr_max = 1e-4, double lr_min = 0.0);

}  // namespace mltr::optim
