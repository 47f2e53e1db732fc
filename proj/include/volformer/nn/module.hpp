#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "volformer/checkpoint.hpp"
#include "volformer/rng.hpp"
#include "volformer/tensor.hpp"

namespace volformer::nn {

// One row of an analytic cost trace. Shapes include the leading batch/slice
// extent, and MACs cover that whole extent.
struct LayerCost {
  std::string name;
  std::string kind;
  Shape input;
  Shape output;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  // Part of `macs` spent on attention scores and value mixing (2*L^2*d).
  std::uint64_t attention_score_macs = 0;
};

class Tracer {
 public:
  void add(LayerCost row) { rows_.push_back(std::move(row)); }
  const std::vector<LayerCost>& rows() const { return rows_; }
  std::uint64_t total_macs() const;
  std::uint64_t total_params() const;

 private:
  std::vector<LayerCost> rows_;
};

enum class InitKind {
  he_normal,       // N(0, 2 / fan_in)
  xavier_uniform,  // U(-a, a), a = sqrt(6 / (fan_in + fan_out))
  token_normal,    // N(0, 0.02^2)
  zeros,
  ones,
};

// Parameter factory. In meta mode tensors carry shapes only, which lets
// full-scale models be traced without allocating their weights.
template <class T>
class Init {
 public:
  explicit Init(std::uint64_t seed, bool meta = false) : rng_(seed), meta_(meta) {}

  Tensor<T> make(Shape shape, InitKind kind, std::size_t fan_in = 1, std::size_t fan_out = 1);
  bool meta() const { return meta_; }

 private:
  Rng rng_;
  bool meta_;
};

template <class T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

template <class T>
class Module {
 public:
  virtual ~Module() = default;

  std::vector<NamedTensor<T>> named_parameters() const;
  std::vector<NamedTensor<T>> named_buffers() const;
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;

  void train(bool on = true);
  void eval() { train(false); }
  bool is_training() const { return training_; }
  void zero_grad();

  // Parameters followed by buffers, converted to f32.
  std::vector<CheckpointEntry> state_dict() const;
  // Copies every entry whose name matches. Entries with a matching name but a
  // different shape are collected and reported in one LoadError. Returns the
  // number of tensors loaded.
  std::size_t load_state(const std::vector<CheckpointEntry>& entries, bool require_all = false);

 protected:
  Tensor<T> register_parameter(std::string name, Tensor<T> t);
  Tensor<T> register_buffer(std::string name, Tensor<T> t);
  template <class M>
  std::shared_ptr<M> register_module(std::string name, std::shared_ptr<M> m) {
    children_.emplace_back(std::move(name), m);
    return m;
  }

 private:
  void collect(const std::string& prefix, bool buffers, std::vector<NamedTensor<T>>& out) const;

  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module<T>>>> children_;
  bool training_ = true;
};

std::string join_name(const std::string& prefix, const std::string& name);

extern template class Init<float>;
extern template class Init<double>;
extern template class Module<float>;
extern template class Module<double>;

}  // namespace volformer::nn
