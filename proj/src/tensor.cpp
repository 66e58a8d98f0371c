#include "satloc/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace satloc {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <std::floating_point T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  tape.root_ = root.node();
  if (!root.requires_grad()) return tape;

  // Iterative post-order DFS; recursion depth would otherwise grow with the
  // number of recorded operations.
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <std::floating_point T>
void Tape<T>::backward() const {
  if (order_.empty()) return;
  Node<T>& root = *order_.back();
  root.ensure_grad();
  std::fill(root.grad.begin(), root.grad.end(), T(1));
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
  }
  // Interior gradients are scratch; only leaves keep theirs.
  for (Node<T>* n : order_)
    if (!n->is_leaf()) n->grad.clear();
}

template <std::floating_point T>
std::vector<const char*> Tape<T>::op_names() const {
  std::vector<const char*> names;
  names.reserve(order_.size());
  for (auto* n : order_) names.push_back(n->op);
  return names;
}

template <std::floating_point T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  Tape<T>::record(loss).backward();
}

template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace satloc
