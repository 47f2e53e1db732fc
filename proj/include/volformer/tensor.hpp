#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace volformer {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Gradient recording is on by default and can be disabled per thread for
// inference.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Records the branch decisions of piecewise-smooth ops (ReLU sign, max-pool
// argmax) while installed on the current thread. Two forward passes with equal
// digests evaluated the same smooth piece of the function.
class BranchProbe {
 public:
  void record(std::uint64_t decision) {
    // splitmix64 finalizer: every input bit reaches every output bit, so two
    // flipped decisions cannot cancel out the way they can in a plain
    // multiplicative hash.
    std::uint64_t z = (digest_ ^ decision) + 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    digest_ = z ^ (z >> 31);
    ++count_;
  }
  std::uint64_t digest() const { return digest_; }
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t digest_ = 0xCBF29CE484222325ULL;
  std::uint64_t count_ = 0;
};

BranchProbe* active_branch_probe();

class BranchProbeScope {
 public:
  explicit BranchProbeScope(BranchProbe* probe);
  ~BranchProbeScope();
  BranchProbeScope(const BranchProbeScope&) = delete;
  BranchProbeScope& operator=(const BranchProbeScope&) = delete;

 private:
  BranchProbe* previous_;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  // Shape-only placeholder used when a model is built for analytic profiling.
  bool meta = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(TensorNode&)> backward_fn;
  std::string_view op = "leaf";

  bool is_leaf() const { return !backward_fn; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Dense row-major tensor handle. Copies share storage; use detach() or clone()
// for an independent copy.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor meta(Shape shape);

  bool defined() const { return static_cast<bool>(node_); }
  bool is_meta() const { return node_ && node_->meta; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const { return volformer::numel(node_->shape); }

  std::span<const T> data() const { return node_->data; }
  // Untracked write access for initialization and optimizer updates.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_ && node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();
  void zero_grad();

  // Reverse-mode pass from a scalar root. Leaf gradients accumulate across
  // calls; intermediate gradients are recomputed each call.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const { return detach(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Creates an op output. Graph edges and the backward closure are kept only
// when gradient mode is on and some input requires a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::string_view op, std::function<void(TensorNode<T>&)> backward_fn);

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::string_view op, std::function<void(TensorNode<T>&)> backward_fn);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace volformer
