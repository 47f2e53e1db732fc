#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "volformer/rng.hpp"
#include "volformer/tensor.hpp"

// Differentiable primitives. Every op accepts tensors that share the scalar
// type T (float or double) and records its backward closure when needed.
namespace volformer {

// Elementwise a + b. `b` may match `a` exactly or match its trailing
// dimensions, in which case it is broadcast over the leading ones.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise product, same broadcasting rule as add().
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// [m x k] . [k x n] -> [m x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// 2-D transpose.
template <class T>
Tensor<T> transpose(const Tensor<T>& a);

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// Contiguous sub-range [start, start + length) along `axis`.
template <class T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

template <class T>
Tensor<T> relu(const Tensor<T>& a);

// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a);

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a);

template <class T>
Tensor<T> tanh(const Tensor<T>& a);

// Max-subtracted softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// Normalizes every slice along `axis` to zero mean and unit variance, then
// applies gamma/beta (both of extent x.size(axis)).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, std::size_t axis, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));

// Per-channel normalization of x[N x C x ...]. In training mode batch
// statistics are used and the running buffers are updated in place.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5));

struct ConvGeometry {
  std::vector<std::size_t> stride;   // one entry per spatial axis, or a single value
  std::vector<std::size_t> padding;  // same
};

// N-d cross-correlation (N in {1,2,3}) over x[B x C_in x D1..DN] with
// w[C_out x C_in x K1..KN]. `bias` may be undefined.
template <class T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
               const ConvGeometry& geometry);

enum class PoolKind { max, avg };

template <class T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind, const std::vector<std::size_t>& window,
               const std::vector<std::size_t>& stride, const std::vector<std::size_t>& padding = {0});

// x[B x C x spatial...] -> [B x C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <class T>
Tensor<T> sum(const Tensor<T>& a);

template <class T>
Tensor<T> mean(const Tensor<T>& a);

// Inverted dropout; identity when rate == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng);

// Mean over the batch of -(1 - p_t)^gamma * log(p_t) with p_t clamped below at
// 1e-12. `clamped`, if given, is incremented once per clamped entry.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& probs, const std::vector<int>& targets, double gamma,
                     std::uint64_t* clamped = nullptr);

// Output extent of a convolution/pooling window; throws ConfigError when the
// window does not fit.
std::size_t window_output_extent(std::size_t input, std::size_t kernel, std::size_t stride,
                                 std::size_t padding);

}  // namespace volformer
