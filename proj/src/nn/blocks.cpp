#include "volformer/nn/blocks.hpp"

#include <cmath>

#include "volformer/error.hpp"

namespace volformer::nn {

namespace {

std::vector<std::size_t> cube(std::size_t rank, std::size_t v) { return std::vector<std::size_t>(rank, v); }

Shape record_passthrough(Tracer& tracer, const std::string& name, const char* kind, const Shape& in, Shape out) {
  tracer.add({name, kind, in, out, 0, 0, 0});
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Bottleneck

template <class T>
Bottleneck<T>::Bottleneck(Init<T>& init, std::size_t rank, std::size_t in_ch, std::size_t mid, std::size_t expansion,
                          std::size_t stride) {
  if (stride != 1 && stride != 2) throw ConfigError("bottleneck stride must be 1 or 2");
  if (in_ch == 0 || mid == 0 || expansion == 0) throw ConfigError("bottleneck widths must be positive");
  const std::size_t out = mid * expansion;
  conv1 = this->register_module("conv1", std::make_shared<Conv<T>>(init, in_ch, mid, cube(rank, 1), cube(rank, 1), cube(rank, 0)));
  bn1 = this->register_module("bn1", std::make_shared<BatchNorm<T>>(init, mid));
  conv2 = this->register_module("conv2", std::make_shared<Conv<T>>(init, mid, mid, cube(rank, 3), cube(rank, stride), cube(rank, 1)));
  bn2 = this->register_module("bn2", std::make_shared<BatchNorm<T>>(init, mid));
  conv3 = this->register_module("conv3", std::make_shared<Conv<T>>(init, mid, out, cube(rank, 1), cube(rank, 1), cube(rank, 0)));
  bn3 = this->register_module("bn3", std::make_shared<BatchNorm<T>>(init, out));
  if (stride != 1 || in_ch != out) {
    proj = this->register_module("downsample.conv",
                                 std::make_shared<Conv<T>>(init, in_ch, out, cube(rank, 1), cube(rank, stride), cube(rank, 0)));
    proj_bn = this->register_module("downsample.bn", std::make_shared<BatchNorm<T>>(init, out));
  }
}

template <class T>
Tensor<T> Bottleneck<T>::forward(const Tensor<T>& x) {
  auto y = relu(bn1->forward(conv1->forward(x)));
  y = relu(bn2->forward(conv2->forward(y)));
  y = bn3->forward(conv3->forward(y));
  const auto skip = proj ? proj_bn->forward(proj->forward(x)) : x;
  return relu(add(y, skip));
}

template <class T>
Shape Bottleneck<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  auto s = conv1->trace(tracer, join_name(name, "conv1"), in);
  s = bn1->trace(tracer, join_name(name, "bn1"), s);
  s = conv2->trace(tracer, join_name(name, "conv2"), s);
  s = bn2->trace(tracer, join_name(name, "bn2"), s);
  s = conv3->trace(tracer, join_name(name, "conv3"), s);
  s = bn3->trace(tracer, join_name(name, "bn3"), s);
  if (proj) {
    auto p = proj->trace(tracer, join_name(name, "downsample.conv"), in);
    p = proj_bn->trace(tracer, join_name(name, "downsample.bn"), p);
    if (p != s) throw ShapeError(name + ": skip shape " + to_string(p) + " != main shape " + to_string(s));
  } else if (in != s) {
    throw ShapeError(name + ": identity skip requires matching shapes");
  }
  return s;
}

// ---------------------------------------------------------------------------
// ResNet encoder

void EncoderSpec::validate() const {
  if (in_channels == 0 || stem_width == 0 || stem_kernel == 0 || stem_stride == 0 || expansion == 0) {
    throw ConfigError("encoder: stem and expansion settings must be positive");
  }
  if (widths.empty() || widths.size() != blocks.size()) {
    throw ConfigError("encoder: widths and blocks must be non-empty lists of equal length");
  }
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0 || blocks[i] == 0) throw ConfigError("encoder: stage widths and block counts must be positive");
  }
}

EncoderSpec EncoderSpec::resnet50() {
  EncoderSpec s;
  s.in_channels = 3;
  s.stem_width = 64;
  s.stem_kernel = 7;
  s.stem_stride = 2;
  s.stem_pool = true;
  s.widths = {64, 128, 256, 512};
  s.blocks = {3, 4, 6, 3};
  s.expansion = 4;
  s.head_classes = 1000;
  return s;
}

template <class T>
ResNetEncoder<T>::ResNetEncoder(Init<T>& init, const EncoderSpec& s, std::size_t r) : spec(s), rank(r) {
  spec.validate();
  if (rank < 1 || rank > 3) throw ConfigError("encoder rank must be 1, 2 or 3");
  stem = this->register_module("conv1", std::make_shared<Conv<T>>(init, spec.in_channels, spec.stem_width,
                                                                  cube(rank, spec.stem_kernel), cube(rank, spec.stem_stride),
                                                                  cube(rank, spec.stem_kernel / 2)));
  stem_bn = this->register_module("bn1", std::make_shared<BatchNorm<T>>(init, spec.stem_width));
  std::size_t channels = spec.stem_width;
  for (std::size_t stage = 0; stage < spec.widths.size(); ++stage) {
    for (std::size_t b = 0; b < spec.blocks[stage]; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      auto block = std::make_shared<Bottleneck<T>>(init, rank, channels, spec.widths[stage], spec.expansion, stride);
      channels = block->out_channels();
      blocks.push_back(this->register_module("layer" + std::to_string(stage + 1) + "." + std::to_string(b), block));
    }
  }
  if (spec.head_classes) head = this->register_module("fc", std::make_shared<Linear<T>>(init, channels, spec.head_classes));
}

template <class T>
Tensor<T> ResNetEncoder<T>::forward(const Tensor<T>& x) {
  auto y = relu(stem_bn->forward(stem->forward(x)));
  if (spec.stem_pool) y = pool(y, PoolKind::max, cube(rank, 3), cube(rank, 2), cube(rank, 1));
  for (auto& b : blocks) y = b->forward(y);
  y = global_avg_pool(y);
  return head ? head->forward(y) : y;
}

template <class T>
Shape ResNetEncoder<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  auto s = stem->trace(tracer, join_name(name, "conv1"), in);
  s = stem_bn->trace(tracer, join_name(name, "bn1"), s);
  if (spec.stem_pool) {
    Shape out{s[0], s[1]};
    for (std::size_t i = 0; i < rank; ++i) out.push_back(window_output_extent(s[2 + i], 3, 2, 1));
    s = record_passthrough(tracer, join_name(name, "maxpool"), "max_pool", s, out);
  }
  std::size_t stage = 0, index = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    while (index >= spec.blocks[stage]) {
      ++stage;
      index = 0;
    }
    s = blocks[i]->trace(tracer, join_name(name, "layer" + std::to_string(stage + 1) + "." + std::to_string(index)), s);
    ++index;
  }
  s = record_passthrough(tracer, join_name(name, "avgpool"), "global_avg_pool", s, Shape{s[0], s[1]});
  if (head) s = head->trace(tracer, join_name(name, "fc"), s);
  return s;
}

// ---------------------------------------------------------------------------
// Attention

void AttentionConfig::validate() const {
  if (dim == 0 || heads == 0) throw ConfigError("attention: dim and heads must be positive");
  if (dim % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (!(mlp_ratio > 0)) throw ConfigError("attention: mlp_ratio must be positive");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("attention: dropout must lie in [0, 1)");
  if (mlp_hidden() == 0) throw ConfigError("attention: mlp hidden width rounds to zero");
}

std::size_t AttentionConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(dim)));
}

template <class T>
MultiHeadAttention<T>::MultiHeadAttention(Init<T>& init, std::size_t d, std::size_t h) : dim(d), heads(h) {
  AttentionConfig{d, h, 1.0, 0.0}.validate();
  query = this->register_module("query", std::make_shared<Linear<T>>(init, d, d));
  key = this->register_module("key", std::make_shared<Linear<T>>(init, d, d));
  value = this->register_module("value", std::make_shared<Linear<T>>(init, d, d));
  output = this->register_module("output", std::make_shared<Linear<T>>(init, d, d));
}

template <class T>
std::vector<Tensor<T>> MultiHeadAttention<T>::head_weights(const Tensor<T>& q, const Tensor<T>& k) const {
  const std::size_t dh = dim / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> out;
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = narrow(q, 1, h * dh, dh);
    const auto kh = narrow(k, 1, h * dh, dh);
    out.push_back(softmax(scale(matmul(qh, transpose(kh)), inv_scale), 1));
  }
  return out;
}

template <class T>
Tensor<T> MultiHeadAttention<T>::forward(const Tensor<T>& tokens) const {
  if (tokens.dim() != 2 || tokens.size(1) != dim) {
    throw ShapeError("attention: expected tokens [L x " + std::to_string(dim) + "], got " + to_string(tokens.shape()));
  }
  const std::size_t dh = dim / heads;
  const auto q = query->forward(tokens);
  const auto k = key->forward(tokens);
  const auto v = value->forward(tokens);
  const auto weights = head_weights(q, k);
  std::vector<Tensor<T>> mixed;
  for (std::size_t h = 0; h < heads; ++h) mixed.push_back(matmul(weights[h], narrow(v, 1, h * dh, dh)));
  return output->forward(heads == 1 ? mixed[0] : concat(mixed, 1));
}

template <class T>
std::vector<Tensor<T>> MultiHeadAttention<T>::attention_weights(const Tensor<T>& tokens) const {
  NoGradGuard guard;
  return head_weights(query->forward(tokens), key->forward(tokens));
}

template <class T>
Shape MultiHeadAttention<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  if (in.size() != 2 || in[1] != dim) throw ShapeError(name + ": expected [L x " + std::to_string(dim) + "], got " + to_string(in));
  const std::uint64_t L = in[0], d = dim;
  const std::uint64_t projections = 4 * L * d * d;
  const std::uint64_t scores = 2 * L * L * d;
  tracer.add({name, "attention", in, in, projections + scores, this->parameter_count(), scores});
  return in;
}

template <class T>
TransformerBlock<T>::TransformerBlock(Init<T>& init, const AttentionConfig& c) : cfg(c) {
  cfg.validate();
  norm1 = this->register_module("norm1", std::make_shared<LayerNorm<T>>(init, cfg.dim));
  attention = this->register_module("attn", std::make_shared<MultiHeadAttention<T>>(init, cfg.dim, cfg.heads));
  norm2 = this->register_module("norm2", std::make_shared<LayerNorm<T>>(init, cfg.dim));
  fc1 = this->register_module("mlp.fc1", std::make_shared<Linear<T>>(init, cfg.dim, cfg.mlp_hidden()));
  fc2 = this->register_module("mlp.fc2", std::make_shared<Linear<T>>(init, cfg.mlp_hidden(), cfg.dim));
}

template <class T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& tokens, Rng& rng) {
  const double rate = this->is_training() ? cfg.dropout : 0.0;
  auto x = add(tokens, dropout(attention->forward(norm1->forward(tokens)), rate, rng));
  auto m = fc2->forward(gelu(fc1->forward(norm2->forward(x))));
  return add(x, dropout(m, rate, rng));
}

template <class T>
Shape TransformerBlock<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  auto s = norm1->trace(tracer, join_name(name, "norm1"), in);
  s = attention->trace(tracer, join_name(name, "attn"), s);
  s = norm2->trace(tracer, join_name(name, "norm2"), s);
  s = fc1->trace(tracer, join_name(name, "mlp.fc1"), s);
  s = fc2->trace(tracer, join_name(name, "mlp.fc2"), s);
  if (s != in) throw ShapeError(name + ": residual shape mismatch");
  return s;
}

// ---------------------------------------------------------------------------
// LSTM

template <class T>
Lstm<T>::Lstm(Init<T>& init, std::size_t in, std::size_t hidden) : input_dim(in), hidden_dim(hidden) {
  if (in == 0 || hidden == 0) throw ConfigError("lstm: dimensions must be positive");
  weight_ih = this->register_parameter("weight_ih", init.make({in, 4 * hidden}, InitKind::xavier_uniform, in, 4 * hidden));
  weight_hh = this->register_parameter("weight_hh", init.make({hidden, 4 * hidden}, InitKind::xavier_uniform, hidden, 4 * hidden));
  bias_ih = this->register_parameter("bias_ih", init.make({4 * hidden}, InitKind::zeros));
  bias_hh = this->register_parameter("bias_hh", init.make({4 * hidden}, InitKind::zeros));
}

template <class T>
std::vector<Tensor<T>> Lstm<T>::run(const Tensor<T>& sequence, bool reverse) const {
  if (sequence.dim() != 2 || sequence.size(1) != input_dim) {
    throw ShapeError("lstm: expected [k x " + std::to_string(input_dim) + "], got " + to_string(sequence.shape()));
  }
  const std::size_t k = sequence.size(0);
  if (k == 0) throw UsageError("lstm: empty sequence");
  const std::size_t H = hidden_dim;
  auto h = Tensor<T>::zeros({1, H});
  auto c = Tensor<T>::zeros({1, H});
  std::vector<Tensor<T>> states;
  for (std::size_t step = 0; step < k; ++step) {
    const std::size_t t = reverse ? k - 1 - step : step;
    const auto x = narrow(sequence, 0, t, 1);
    const auto z = add(add(matmul(x, weight_ih), bias_ih), add(matmul(h, weight_hh), bias_hh));
    const auto i = sigmoid(narrow(z, 1, 0, H));
    const auto f = sigmoid(narrow(z, 1, H, H));
    const auto g = tanh(narrow(z, 1, 2 * H, H));
    const auto o = sigmoid(narrow(z, 1, 3 * H, H));
    c = add(mul(f, c), mul(i, g));
    h = mul(o, tanh(c));
    states.push_back(h);
  }
  return states;
}

template <class T>
Shape Lstm<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  if (in.size() != 2 || in[1] != input_dim) throw ShapeError(name + ": expected [k x " + std::to_string(input_dim) + "]");
  const std::uint64_t macs = in[0] * 4 * hidden_dim * (input_dim + hidden_dim);
  Shape out{in[0], hidden_dim};
  tracer.add({name, "lstm", in, out, macs, this->parameter_count(), 0});
  return out;
}

template <class T>
BiLstm<T>::BiLstm(Init<T>& init, std::size_t input_dim, std::size_t hidden, std::size_t layers) : hidden_dim(hidden) {
  if (layers == 0) throw ConfigError("lstm: at least one layer required");
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = l == 0 ? input_dim : 2 * hidden;
    const std::string prefix = "layer" + std::to_string(l);
    forward_layers.push_back(this->register_module(prefix + ".fwd", std::make_shared<Lstm<T>>(init, in, hidden)));
    backward_layers.push_back(this->register_module(prefix + ".bwd", std::make_shared<Lstm<T>>(init, in, hidden)));
  }
}

template <class T>
Tensor<T> BiLstm<T>::forward(const Tensor<T>& features) const {
  if (features.dim() != 2 || features.size(0) == 0) throw UsageError("bilstm: empty sequence");
  auto input = features;
  const std::size_t k = features.size(0);
  for (std::size_t l = 0; l < forward_layers.size(); ++l) {
    const auto fs = forward_layers[l]->run(input, false);
    const auto bs = backward_layers[l]->run(input, true);
    if (l + 1 == forward_layers.size()) {
      return reshape(concat<T>({fs.back(), bs.back()}, 1), {2 * hidden_dim});
    }
    std::vector<Tensor<T>> rows;
    for (std::size_t t = 0; t < k; ++t) rows.push_back(concat<T>({fs[t], bs[k - 1 - t]}, 1));
    input = concat(rows, 0);
  }
  return input;  // unreachable: at least one layer
}

template <class T>
Shape BiLstm<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  if (in.size() != 2 || in[0] == 0) throw ShapeError(name + ": expected a non-empty [k x f] sequence");
  Shape s = in;
  for (std::size_t l = 0; l < forward_layers.size(); ++l) {
    const std::string prefix = join_name(name, "layer" + std::to_string(l));
    auto f = forward_layers[l]->trace(tracer, prefix + ".fwd", s);
    backward_layers[l]->trace(tracer, prefix + ".bwd", s);
    s = Shape{f[0], 2 * hidden_dim};
  }
  return Shape{2 * hidden_dim};
}

// ---------------------------------------------------------------------------
// (2+1)D

template <class T>
std::size_t Conv2Plus1d<T>::matched_width(std::size_t in_ch, std::size_t out_ch) {
  return (27 * in_ch * out_ch) / (9 * in_ch + 3 * out_ch);
}

template <class T>
Conv2Plus1d<T>::Conv2Plus1d(Init<T>& init, std::size_t in_ch, std::size_t out_ch, std::size_t stride, std::size_t mid)
    : mid_channels(mid ? mid : matched_width(in_ch, out_ch)) {
  if (in_ch == 0 || out_ch == 0 || mid_channels == 0) throw ConfigError("(2+1)D conv: widths must be positive");
  spatial = this->register_module("spatial", std::make_shared<Conv<T>>(init, in_ch, mid_channels, std::vector<std::size_t>{1, 3, 3},
                                                                     std::vector<std::size_t>{1, stride, stride},
                                                                     std::vector<std::size_t>{0, 1, 1}));
  mid_bn = this->register_module("bn", std::make_shared<BatchNorm<T>>(init, mid_channels));
  temporal = this->register_module("temporal", std::make_shared<Conv<T>>(init, mid_channels, out_ch, std::vector<std::size_t>{3, 1, 1},
                                                                       std::vector<std::size_t>{stride, 1, 1},
                                                                       std::vector<std::size_t>{1, 0, 0}));
}

template <class T>
Tensor<T> Conv2Plus1d<T>::forward(const Tensor<T>& x) {
  if (x.dim() != 5) throw ShapeError("(2+1)D conv: expected [N x C x D x H x W], got " + to_string(x.shape()));
  return temporal->forward(relu(mid_bn->forward(spatial->forward(x))));
}

template <class T>
Shape Conv2Plus1d<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  if (in.size() != 5) throw ShapeError(name + ": expected [N x C x D x H x W], got " + to_string(in));
  auto s = spatial->trace(tracer, join_name(name, "spatial"), in);
  s = mid_bn->trace(tracer, join_name(name, "bn"), s);
  return temporal->trace(tracer, join_name(name, "temporal"), s);
}

template <class T>
R2Plus1dBlock<T>::R2Plus1dBlock(Init<T>& init, std::size_t in_ch, std::size_t out_ch, std::size_t stride) {
  if (stride != 1 && stride != 2) throw ConfigError("(2+1)D block stride must be 1 or 2");
  conv1 = this->register_module("conv1", std::make_shared<Conv2Plus1d<T>>(init, in_ch, out_ch, stride));
  bn1 = this->register_module("bn1", std::make_shared<BatchNorm<T>>(init, out_ch));
  conv2 = this->register_module("conv2", std::make_shared<Conv2Plus1d<T>>(init, out_ch, out_ch, 1));
  bn2 = this->register_module("bn2", std::make_shared<BatchNorm<T>>(init, out_ch));
  if (stride != 1 || in_ch != out_ch) {
    proj = this->register_module("downsample.conv", std::make_shared<Conv<T>>(init, in_ch, out_ch, cube(3, 1), cube(3, stride), cube(3, 0)));
    proj_bn = this->register_module("downsample.bn", std::make_shared<BatchNorm<T>>(init, out_ch));
  }
}

template <class T>
Tensor<T> R2Plus1dBlock<T>::forward(const Tensor<T>& x) {
  auto y = relu(bn1->forward(conv1->forward(x)));
  y = bn2->forward(conv2->forward(y));
  const auto skip = proj ? proj_bn->forward(proj->forward(x)) : x;
  return relu(add(y, skip));
}

template <class T>
Shape R2Plus1dBlock<T>::trace(Tracer& tracer, const std::string& name, const Shape& in) const {
  auto s = conv1->trace(tracer, join_name(name, "conv1"), in);
  s = bn1->trace(tracer, join_name(name, "bn1"), s);
  s = conv2->trace(tracer, join_name(name, "conv2"), s);
  s = bn2->trace(tracer, join_name(name, "bn2"), s);
  if (proj) {
    auto p = proj->trace(tracer, join_name(name, "downsample.conv"), in);
    p = proj_bn->trace(tracer, join_name(name, "downsample.bn"), p);
    if (p != s) throw ShapeError(name + ": skip shape " + to_string(p) + " != main shape " + to_string(s));
  } else if (in != s) {
    throw ShapeError(name + ": identity skip requires matching shapes");
  }
  return s;
}

#define VF_INSTANTIATE_BLOCKS(T)        \
  template class Bottleneck<T>;         \
  template class ResNetEncoder<T>;      \
  template class MultiHeadAttention<T>; \
  template class TransformerBlock<T>;   \
  template class Lstm<T>;               \
  template class BiLstm<T>;             \
  template class Conv2Plus1d<T>;        \
  template class R2Plus1dBlock<T>;
VF_INSTANTIATE_BLOCKS(float)
VF_INSTANTIATE_BLOCKS(double)
#undef VF_INSTANTIATE_BLOCKS

}  // namespace volformer::nn
