#include "dept/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace dept {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be >= 1, got " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  std::vector<T> data(shape_numel(shape), T{0});
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Shape shape, std::vector<T> data, const std::vector<Tensor>& inputs,
                             BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data), false);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    auto& node = *out.node_;
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (const auto& t : inputs) node.parents.push_back(t.node_);
    node.backward_fn = std::move(fn);
  }
  return out;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_string(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!is_leaf()) throw ContractError("only leaf tensors may be modified in place");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

template <typename T>
void Tensor<T>::backward() const {
  if (!defined() || numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (defined() ? shape_string(shape()) : std::string("<undefined>")));
  }
  if (!node_->requires_grad) {
    throw ContractError("backward() on a loss that does not depend on any trainable tensor");
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass scratch; leaf gradients accumulate.
  for (NodeT* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T{0});
  }
  node_->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach(bool requires_grad) const {
  return Tensor(shape(), node_->data, requires_grad);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace dept
