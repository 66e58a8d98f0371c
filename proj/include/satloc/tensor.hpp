#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "satloc/errors.hpp"

namespace satloc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s);

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into its inputs' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle with reverse-mode autodiff.
///
/// Copies share storage; use `clone()` for a deep copy and `detach()` to cut
/// a value out of the graph. Gradients accumulate into leaves on `backward`.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape))
      throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                           " values for shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor scalar(T v, bool requires_grad = false) { return full({}, v, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op_name() const { return node_->op; }

  std::span<const T> data() const { return node_->value; }
  // Mutable view; only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->value; }
  std::vector<T>& storage() { return node_->value; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  Tensor detach() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
  }
  Tensor clone() const { return detach(); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Topologically ordered record of the operations that produced a tensor.
template <std::floating_point T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root);

  // Replays the recorded operations in reverse, seeding d(root)/d(root) = 1.
  void backward() const;

  std::size_t size() const { return order_.size(); }
  std::vector<const char*> op_names() const;

 private:
  std::vector<Node<T>*> order_;  // inputs precede consumers
  std::shared_ptr<Node<T>> root_;
};

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
/// `loss`. Throws ContractError when `loss` is not a scalar.
template <std::floating_point T>
void backward(const Tensor<T>& loss);

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace satloc
