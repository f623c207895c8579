#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "mltr/tensor.hpp"

namespace mltr::ad {

// Ordered record of the differentiable operations executed while the tape is
// active on the current thread. Constructing a tape makes it active;
// destroying it restores the previously active tape. Operations executed with
// no active tape are not recorded (inference mode).
//
// backward() zeroes the gradient of every node on the tape, seeds the loss
// with 1 and replays the entries in exact reverse order. The tape is consumed
// by backward(); calling it a second time without recording new operations
// is a contract error.
template <typename T>
class GradTape {
 public:
  GradTape() : prev_(active_) { active_ = this; }
  ~GradTape() { active_ = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_; }

  void record(std::shared_ptr<Node<T>> out,
              std::vector<std::shared_ptr<Node<T>>> inputs,
              std::function<void()> backward_fn) {
    entries_.push_back({std::move(out), std::move(inputs), std::move(backward_fn)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (entries_.empty()) {
      throw ContractError("backward() on an empty or already consumed tape");
    }
    for (auto& e : entries_) {
      e.out->grad.assign(e.out->size(), T(0));
      for (auto& in : e.inputs) {
        if (in->requires_grad) in->grad.assign(in->size(), T(0));
      }
    }
    loss.node()->g()[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      it->fn();
      ++replayed_;
    }
    entries_.clear();
  }

  // Number of entries replayed by the last backward() calls; used by tests
  // that check replay order.
  std::size_t replayed() const { return replayed_; }

 private:
  struct Entry {
    std::shared_ptr<Node<T>> out;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void()> fn;
  };

  std::vector<Entry> entries_;
  GradTape* prev_;
  std::size_t replayed_ = 0;
  static inline thread_local GradTape* active_ = nullptr;
};

// Runs backward on the tape active on this thread.
template <typename T>
void backward(const Tensor<T>& loss) {
  auto* tape = GradTape<T>::active();
  if (!tape) throw ContractError("backward() with no active GradTape");
  tape->backward(loss);
}

}  // namespace mltr::ad
