#include "volformer/nn/layers.hpp"

#include "volformer/error.hpp"

namespace volformer::nn {

namespace {

std::size_t product(const std::vector<std::size_t>& v) {
  std::size_t p = 1;
  for (auto x : v) p *= x;
  return p;
}

std::size_t expand(const std::vector<std::size_t>& v, std::size_t i, std::size_t fallback) {
  if (v.empty()) return fallback;
  return v.size() == 1 ? v[0] : v.at(i);
}

}  // namespace

template <class T>
Linear<T>::Linear(Init<T>& init, std::size_t in, std::size_t out, bool with_bias)
    : in_features(in), out_features(out) {
  if (in == 0 || out == 0) throw ConfigError("linear layer extents must be positive");
  weight = this->register_parameter("weight", init.make({in, out}, InitKind::xavier_uniform, in, out));
  if (with_bias) bias = this->register_parameter("bias", init.make({out}, InitKind::zeros));
}

template <class T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  auto y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

template <class T>
Shape Linear<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  if (in.size() != 2 || in[1] != in_features) {
    throw ShapeError(name + ": expected [N x " + std::to_string(in_features) + "], got " + to_string(in));
  }
  Shape out{in[0], out_features};
  tracer.add({name, "linear", in, out, in[0] * in_features * out_features, this->parameter_count(), 0});
  return out;
}

template <class T>
Conv<T>::Conv(Init<T>& init, std::size_t in_ch, std::size_t out_ch, std::vector<std::size_t> k,
              std::vector<std::size_t> stride, std::vector<std::size_t> padding, bool with_bias)
    : in_channels(in_ch), out_channels(out_ch), kernel(std::move(k)), geometry{std::move(stride), std::move(padding)} {
  if (kernel.empty() || kernel.size() > 3) throw ConfigError("convolution rank must be 1, 2 or 3");
  if (in_ch == 0 || out_ch == 0) throw ConfigError("convolution channel counts must be positive");
  Shape shape{out_ch, in_ch};
  shape.insert(shape.end(), kernel.begin(), kernel.end());
  const std::size_t fan_in = in_ch * product(kernel);
  weight = this->register_parameter("weight", init.make(shape, InitKind::he_normal, fan_in, out_ch * product(kernel)));
  if (with_bias) bias = this->register_parameter("bias", init.make({out_ch}, InitKind::zeros));
}

template <class T>
Tensor<T> Conv<T>::forward(const Tensor<T>& x) const {
  return conv(x, weight, bias, geometry);
}

template <class T>
Shape Conv<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  if (in.size() != rank() + 2 || in[1] != in_channels) {
    throw ShapeError(name + ": expected [N x " + std::to_string(in_channels) + " x " + std::to_string(rank()) +
                     " spatial axes], got " + to_string(in));
  }
  Shape out{in[0], out_channels};
  std::size_t positions = 1;
  for (std::size_t i = 0; i < rank(); ++i) {
    const std::size_t o = window_output_extent(in[2 + i], kernel[i], expand(geometry.stride, i, 1),
                                               expand(geometry.padding, i, 0));
    out.push_back(o);
    positions *= o;
  }
  const std::uint64_t macs = in[0] * positions * product(kernel) * in_channels * out_channels;
  tracer.add({name, "conv" + std::to_string(rank()) + "d", in, out, macs, this->parameter_count(), 0});
  return out;
}

template <class T>
BatchNorm<T>::BatchNorm(Init<T>& init, std::size_t c, T m, T e) : channels(c), momentum(m), eps(e) {
  gamma = this->register_parameter("gamma", init.make({c}, InitKind::ones));
  beta = this->register_parameter("beta", init.make({c}, InitKind::zeros));
  running_mean = this->register_buffer("running_mean", init.make({c}, InitKind::zeros));
  running_var = this->register_buffer("running_var", init.make({c}, InitKind::ones));
}

template <class T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x) {
  return batch_norm(x, gamma, beta, running_mean, running_var, this->is_training(), momentum, eps);
}

template <class T>
Shape BatchNorm<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  if (in.size() < 2 || in[1] != channels) throw ShapeError(name + ": channel mismatch for " + to_string(in));
  tracer.add({name, "batch_norm", in, in, 0, this->parameter_count(), 0});
  return in;
}

template <class T>
LayerNorm<T>::LayerNorm(Init<T>& init, std::size_t d, T e) : dim(d), eps(e) {
  gamma = this->register_parameter("gamma", init.make({d}, InitKind::ones));
  beta = this->register_parameter("beta", init.make({d}, InitKind::zeros));
}

template <class T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const {
  return layer_norm(x, x.dim() - 1, gamma, beta, eps);
}

template <class T>
Shape LayerNorm<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  if (in.empty() || in.back() != dim) throw ShapeError(name + ": last axis mismatch for " + to_string(in));
  tracer.add({name, "layer_norm", in, in, 0, this->parameter_count(), 0});
  return in;
}

template class Linear<float>;
template class Linear<double>;
template class Conv<float>;
template class Conv<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;

}  // namespace volformer::nn
