#pragma once

#include <memory>
#include <vector>

#include "volformer/nn/layers.hpp"

namespace volformer::nn {

// ResNet bottleneck: 1x1 -> 3x3 (strided) -> 1x1, each followed by batch-norm,
// ReLU after the first two and after the residual sum. The skip path is a
// strided 1x1 projection whenever the shape changes.
template <class T>
class Bottleneck : public Module<T> {
 public:
  Bottleneck(Init<T>& init, std::size_t rank, std::size_t in_channels, std::size_t mid_channels,
             std::size_t expansion, std::size_t stride);

  Tensor<T> forward(const Tensor<T>& x);
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;
  std::size_t out_channels() const { return conv3->out_channels; }

  std::shared_ptr<Conv<T>> conv1, conv2, conv3, proj;
  std::shared_ptr<BatchNorm<T>> bn1, bn2, bn3, proj_bn;
};

struct EncoderSpec {
  std::size_t in_channels = 1;
  std::size_t stem_width = 8;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 2;
  bool stem_pool = false;
  std::vector<std::size_t> widths{4, 8};  // bottleneck inner width per stage
  std::vector<std::size_t> blocks{1, 1};
  std::size_t expansion = 4;
  std::size_t head_classes = 0;  // > 0 appends a linear classifier

  std::size_t out_features() const { return head_classes ? head_classes : widths.back() * expansion; }
  void validate() const;

  // He et al. ResNet-50 layout with the 1000-way ImageNet classifier.
  static EncoderSpec resnet50();
};

// Bottleneck ResNet over `rank` spatial axes ending in global average pooling:
// [N x C x spatial...] -> [N x features].
template <class T>
class ResNetEncoder : public Module<T> {
 public:
  ResNetEncoder(Init<T>& init, const EncoderSpec& spec, std::size_t rank);

  Tensor<T> forward(const Tensor<T>& x);
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;
  std::size_t out_features() const { return spec.out_features(); }

  EncoderSpec spec;
  std::size_t rank;
  std::shared_ptr<Conv<T>> stem;
  std::shared_ptr<BatchNorm<T>> stem_bn;
  std::vector<std::shared_ptr<Bottleneck<T>>> blocks;
  std::shared_ptr<Linear<T>> head;
};

struct AttentionConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  double mlp_ratio = 1.0;
  double dropout = 0.1;

  void validate() const;
  std::size_t mlp_hidden() const;
};

// Multi-head self-attention over tokens[L x d].
template <class T>
class MultiHeadAttention : public Module<T> {
 public:
  MultiHeadAttention(Init<T>& init, std::size_t dim, std::size_t heads);

  Tensor<T> forward(const Tensor<T>& tokens) const;
  // Row-stochastic [L x L] weights per head.
  std::vector<Tensor<T>> attention_weights(const Tensor<T>& tokens) const;
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;

  std::size_t dim;
  std::size_t heads;
  std::shared_ptr<Linear<T>> query, key, value, output;

 private:
  std::vector<Tensor<T>> head_weights(const Tensor<T>& q, const Tensor<T>& k) const;
};

// Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.)) with a GELU MLP.
template <class T>
class TransformerBlock : public Module<T> {
 public:
  TransformerBlock(Init<T>& init, const AttentionConfig& cfg);

  Tensor<T> forward(const Tensor<T>& tokens, Rng& rng);
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;

  AttentionConfig cfg;
  std::shared_ptr<LayerNorm<T>> norm1, norm2;
  std::shared_ptr<MultiHeadAttention<T>> attention;
  std::shared_ptr<Linear<T>> fc1, fc2;
};

// Single-direction LSTM with gate order (input, forget, cell, output).
template <class T>
class Lstm : public Module<T> {
 public:
  Lstm(Init<T>& init, std::size_t input_dim, std::size_t hidden_dim);

  // Hidden states [1 x h] in processing order; `reverse` walks the sequence
  // from the last row to the first.
  std::vector<Tensor<T>> run(const Tensor<T>& sequence, bool reverse) const;
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;

  std::size_t input_dim;
  std::size_t hidden_dim;
  Tensor<T> weight_ih, weight_hh, bias_ih, bias_hh;
};

template <class T>
class BiLstm : public Module<T> {
 public:
  BiLstm(Init<T>& init, std::size_t input_dim, std::size_t hidden_dim, std::size_t layers = 1);

  // features[k x f] -> [2h]: final forward state followed by the backward
  // state after reaching the first element.
  Tensor<T> forward(const Tensor<T>& features) const;
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;

  std::size_t hidden_dim;
  std::vector<std::shared_ptr<Lstm<T>>> forward_layers;
  std::vector<std::shared_ptr<Lstm<T>>> backward_layers;
};

// Factorized 3-D convolution over [N x C x D x H x W]: a 1x3x3 spatial conv,
// batch-norm + ReLU, then a 3x1x1 through-plane conv.
template <class T>
class Conv2Plus1d : public Module<T> {
 public:
  Conv2Plus1d(Init<T>& init, std::size_t in_channels, std::size_t out_channels, std::size_t stride = 1,
              std::size_t mid_channels = 0);

  // Intermediate width giving the same parameter count as a full 3x3x3 conv.
  static std::size_t matched_width(std::size_t in_channels, std::size_t out_channels);

  Tensor<T> forward(const Tensor<T>& x);
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;

  std::size_t mid_channels;
  std::shared_ptr<Conv<T>> spatial;
  std::shared_ptr<BatchNorm<T>> mid_bn;
  std::shared_ptr<Conv<T>> temporal;
};

// Residual block of two factorized convolutions.
template <class T>
class R2Plus1dBlock : public Module<T> {
 public:
  R2Plus1dBlock(Init<T>& init, std::size_t in_channels, std::size_t out_channels, std::size_t stride);

  Tensor<T> forward(const Tensor<T>& x);
  Shape trace(Tracer& tracer, const std::string& name, const Shape& in) const;

  std::shared_ptr<Conv2Plus1d<T>> conv1, conv2;
  std::shared_ptr<BatchNorm<T>> bn1, bn2, proj_bn;
  std::shared_ptr<Conv<T>> proj;
};

#define VF_EXTERN_BLOCKS(T)                    \
  extern template class Bottleneck<T>;         \
  extern template class ResNetEncoder<T>;      \
  extern template class MultiHeadAttention<T>; \
  extern template class TransformerBlock<T>;   \
  extern template class Lstm<T>;               \
  extern template class BiLstm<T>;             \
  extern template class Conv2Plus1d<T>;        \
  extern template class R2Plus1dBlock<T>;
VF_EXTERN_BLOCKS(float)
VF_EXTERN_BLOCKS(double)
#undef VF_EXTERN_BLOCKS

}  // namespace volformer::nn
