#pragma once

#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mltr/error.hpp"

namespace mltr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace ad {

// Storage for one tensor in the graph. Data lives behind a shared_ptr so a
// parameter can be aliased by per-thread replicas that keep their own grad.
template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;  // empty means "absent"
  bool requires_grad = false;
  bool leaf = true;

  std::size_t size() const { return data->size(); }
  T* d() { return data->data(); }
  const T* d() const { return data->data(); }
  // Allocates a zeroed gradient buffer on first use.
  T* g() {
    if (grad.size() != data->size()) grad.assign(data->size(), T(0));
    return grad.data();
  }
};

// Dense row-major tensor handle. Copies share the underlying node; use
// clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    std::vector<T> v(mltr::numel(shape), value);
    return from(std::move(shape), std::move(v));
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (mltr::numel(shape) != values.size()) {
      throw ShapeError("tensor data size " + std::to_string(values.size()) +
                       " does not match shape " + to_string(shape));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::make_shared<std::vector<T>>(std::move(values));
    return Tensor(std::move(n));
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  // Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data->size(); }

  std::span<const T> data() const { return {node_->d(), node_->size()}; }
  // Writes through to every handle (and alias) sharing this storage.
  std::span<T> mutable_data() { return {node_->d(), node_->size()}; }
  T operator[](std::size_t i) const { return (*node_->data)[i]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return (*node_->data)[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return {node_->grad.data(), node_->grad.size()}; }
  std::span<T> mutable_grad() { return {node_->g(), node_->size()}; }
  void clear_grad() { node_->grad.clear(); }

  // New leaf sharing storage but with an independent grad buffer.
  Tensor alias() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node_->shape;
    n->data = node_->data;
    n->requires_grad = node_->requires_grad;
    return Tensor(std::move(n));
  }

  // Non-tracking view of the same storage.
  Tensor detach() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node_->shape;
    n->data = node_->data;
    return Tensor(std::move(n));
  }

  Tensor clone() const {
    Tensor t = from(node_->shape, *node_->data);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  bool shares_storage(const Tensor& o) const { return node_->data == o.node_->data; }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> v(t.data().begin(), t.data().end());
  return Tensor<To>::from(t.shape(), std::move(v));
}

}  // namespace ad
}  // namespace mltr
