// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a dynamically recorded reverse-mode graph.
//
// A Tensor is a cheap shared handle. Values are fixed once an op has produced them; the
// only mutation paths are `mutable_values()` on leaves (initialisation, optimizer updates)
// and gradient accumulation during `backward()`. An op output records its parents only when
// at least one input requires a gradient, so forward passes through frozen models build no
// graph at all.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ted {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `self.grad` and accumulates into the parents that require a gradient.
  std::function<void(Node& self)> backward_fn;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;
  using BackwardFn = std::function<void(detail::Node<T>&)>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return values().size(); }

  std::span<const T> values() const;
  /// Leaf-only write access.
  std::span<T> mutable_values();
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();
  void clear_grad();

  /// Reverse-mode sweep from this scalar. Leaves that require a gradient accumulate into
  /// their grad buffers; intermediate gradients are released as soon as they are consumed.
  void backward() const;

  /// New leaf sharing no graph with this tensor; never requires a gradient.
  Tensor detach() const;
  /// Storage-independent copy of the values as a fresh leaf with the same requires_grad flag.
  Tensor clone() const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  /// Builds an op output. Parents and the backward rule are recorded only if some input
  /// requires a gradient.
  static Tensor make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor> inputs,
                            BackwardFn backward);

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  const detail::Node<T>& node() const;

  NodePtr node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ted
