#include "volformer/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "volformer/error.hpp"

namespace volformer {

namespace {
thread_local bool t_grad_enabled = true;
thread_local BranchProbe* t_probe = nullptr;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

BranchProbe* active_branch_probe() { return t_probe; }

BranchProbeScope::BranchProbeScope(BranchProbe* probe) : previous_(t_probe) { t_probe = probe; }
BranchProbeScope::~BranchProbeScope() { t_probe = previous_; }

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->data.assign(volformer::numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  if (volformer::numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + volformer::to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::meta(Shape shape) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->meta = true;
  return Tensor(std::move(node));
}

template <class T>
std::size_t Tensor<T>::size(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     volformer::to_string(node_->shape));
  }
  return node_->shape[axis];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + volformer::to_string(shape()));
  return node_->data[0];
}

template <class T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != dim()) throw ShapeError("index rank mismatch for " + volformer::to_string(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw ShapeError("index out of range for " + volformer::to_string(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

template <class T>
std::span<T> Tensor<T>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <class T>
void Tensor<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
void Tensor<T>::backward() const {
  if (!node_) throw UsageError("backward() on undefined tensor");
  if (numel() != 1) {
    throw UsageError("backward() requires a scalar root, got shape " + volformer::to_string(shape()));
  }
  if (!node_->requires_grad) throw UsageError("backward() root does not require grad");

  // Iterative post-order DFS yields a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->is_leaf()) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->data.size(), T(0));
    }
  }
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(node_->shape, node_->data, false);
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::string_view op, std::function<void(TensorNode<T>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (needs) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::string_view op, std::function<void(TensorNode<T>&)> backward_fn) {
  return make_result(std::move(shape), std::move(data), std::vector<Tensor<T>>(inputs), op,
                     std::move(backward_fn));
}

template class Tensor<float>;
template class Tensor<double>;

#define VF_INSTANTIATE(T)                                                                           \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, const std::vector<Tensor<T>>&,          \
                                    std::string_view, std::function<void(TensorNode<T>&)>);         \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, std::initializer_list<Tensor<T>>,       \
                                    std::string_view, std::function<void(TensorNode<T>&)>);

VF_INSTANTIATE(float)
VF_INSTANTIATE(double)
#undef VF_INSTANTIATE

}  // namespace volformer
