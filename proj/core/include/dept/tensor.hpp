#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dept/error.hpp"

namespace dept {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Numeric mode of a computation graph. Training runs in 32-bit; gradient
// checks run in 64-bit. The mode is carried by the element type, so one graph
// can never mix the two.
enum class Precision { kStandard32, kCheck64 };

template <typename T>
inline constexpr Precision precision_of = Precision::kStandard32;
template <>
inline constexpr Precision precision_of<double> = Precision::kCheck64;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "no gradient"
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const noexcept { return !backward_fn; }

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

// Dense row-major tensor with reverse-mode autodiff.
//
// A Tensor is a cheap shared handle. Values are immutable after construction,
// except for leaves, whose data may be updated in place by an optimizer.
// Each operation records its inputs so that backward() can walk the graph.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;
  using BackwardFn = std::function<void(detail::Node<T>&)>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  // Result of an operation. Records `inputs` and `fn` only when at least one
  // input requires a gradient.
  static Tensor from_op(Shape shape, std::vector<T> data,
                        const std::vector<Tensor>& inputs, BackwardFn fn);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Leaves only.
  std::span<T> mutable_data();
  T operator[](std::size_t i) const { return node_->data[i]; }
  T item() const;

  bool is_leaf() const { return node_->is_leaf(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  // Drops the gradient; has_grad() is false afterwards.
  void zero_grad() { node_->grad.clear(); }

  // Seeds d(this)/d(this) = 1 and propagates through the recorded graph.
  // Leaf gradients accumulate across calls.
  void backward() const;

  // Fresh leaf holding a copy of the values.
  Tensor detach(bool requires_grad = false) const;

  const NodePtr& node() const noexcept { return node_; }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dept
