#pragma once

#include <vector>

#include "volformer/nn/module.hpp"
#include "volformer/ops.hpp"

namespace volformer::nn {

// y = x W + b with x[N x in], W[in x out].
template <class T>
class Linear : public Module<T> {
 public:
  Linear(Init<T>& init, std::size_t in_features, std::size_t out_features, bool with_bias = true);

  Tensor<T> forward(const Tensor<T>& x) const;
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;

  std::size_t in_features;
  std::size_t out_features;
  Tensor<T> weight;
  Tensor<T> bias;
};

// Cross-correlation over 1, 2 or 3 spatial axes, input [N x C x spatial...].
template <class T>
class Conv : public Module<T> {
 public:
  Conv(Init<T>& init, std::size_t in_channels, std::size_t out_channels, std::vector<std::size_t> kernel,
       std::vector<std::size_t> stride, std::vector<std::size_t> padding, bool with_bias = false);

  Tensor<T> forward(const Tensor<T>& x) const;
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;
  std::size_t rank() const { return kernel.size(); }

  std::size_t in_channels;
  std::size_t out_channels;
  std::vector<std::size_t> kernel;
  ConvGeometry geometry;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <class T>
class BatchNorm : public Module<T> {
 public:
  BatchNorm(Init<T>& init, std::size_t channels, T momentum = T(0.1), T eps = T(1e-5));

  Tensor<T> forward(const Tensor<T>& x);
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;

  std::size_t channels;
  T momentum;
  T eps;
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

// Normalizes over the last axis.
template <class T>
class LayerNorm : public Module<T> {
 public:
  LayerNorm(Init<T>& init, std::size_t dim, T eps = T(1e-5));

  Tensor<T> forward(const Tensor<T>& x) const;
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;

  std::size_t dim;
  T eps;
  Tensor<T> gamma;
  Tensor<T> beta;
};

extern template class Linear<float>;
extern template class Linear<double>;
extern template class Conv<float>;
extern template class Conv<double>;
extern template class BatchNorm<float>;
extern template class BatchNorm<double>;
extern template class LayerNorm<float>;
extern template class LayerNorm<double>;

}  // namespace volformer::nn
