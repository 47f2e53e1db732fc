#include "volformer/models/model.hpp"

#include "volformer/checkpoint.hpp"
#include "volformer/error.hpp"
#include "volformer/text.hpp"

namespace volformer::models {

using nn::join_name;

// ---------------------------------------------------------------------------
// Aggregators

template <class T>
TransformerAggregator<T>::TransformerAggregator(nn::Init<T>& init, std::size_t features, const nn::AttentionConfig& cfg,
                                                std::size_t block_count, std::vector<std::size_t> tokens,
                                                std::size_t classes)
    : feature_dim(features), tokens_per_view(std::move(tokens)) {
  cfg.validate();
  const std::size_t d = cfg.dim;
  std::size_t total = 0;
  for (auto k : tokens_per_view) total += k;
  projection = this->register_module("projection", std::make_shared<nn::Linear<T>>(init, features, d));
  class_token = this->register_parameter("class_token", init.make({1, d}, nn::InitKind::token_normal));
  position_embedding = this->register_parameter("position_embedding", init.make({1 + total, d}, nn::InitKind::token_normal));
  if (tokens_per_view.size() > 1) {
    view_embedding = this->register_parameter("view_embedding", init.make({tokens_per_view.size(), d}, nn::InitKind::token_normal));
  }
  for (std::size_t i = 0; i < block_count; ++i) {
    blocks.push_back(this->register_module("blocks." + std::to_string(i), std::make_shared<nn::TransformerBlock<T>>(init, cfg)));
  }
  norm = this->register_module("norm", std::make_shared<nn::LayerNorm<T>>(init, d));
  head = this->register_module("head", std::make_shared<nn::Linear<T>>(init, d, classes));
}

template <class T>
Tensor<T> TransformerAggregator<T>::forward(const std::vector<Tensor<T>>& features, Rng& rng) {
  if (features.size() != tokens_per_view.size()) throw ShapeError("transformer aggregator: wrong number of views");
  const std::size_t d = class_token.size(1);
  std::vector<Tensor<T>> parts{class_token};
  for (std::size_t v = 0; v < features.size(); ++v) {
    if (features[v].dim() != 2 || features[v].size(0) != tokens_per_view[v] || features[v].size(1) != feature_dim) {
      throw ShapeError("transformer aggregator: expected features [" + std::to_string(tokens_per_view[v]) + "x" +
                       std::to_string(feature_dim) + "], got " + to_string(features[v].shape()));
    }
    auto e = projection->forward(features[v]);
    if (view_embedding.defined()) e = add(e, reshape(narrow(view_embedding, 0, v, 1), {d}));
    parts.push_back(e);
  }
  auto tokens = add(concat(parts, 0), position_embedding);
  for (auto& b : blocks) tokens = b->forward(tokens, rng);
  return head->forward(norm->forward(narrow(tokens, 0, 0, 1)));
}

template <class T>
void TransformerAggregator<T>::trace(nn::Tracer& tracer, const std::string& name) const {
  const std::size_t d = class_token.size(1);
  std::size_t total = 1;
  for (std::size_t v = 0; v < tokens_per_view.size(); ++v) {
    const std::string suffix = tokens_per_view.size() > 1 ? "." + std::to_string(v) : "";
    nn::Tracer local;
    projection->trace(local, join_name(name, "projection") + suffix, {tokens_per_view[v], feature_dim});
    auto row = local.rows().front();
    if (v > 0) row.params = 0;  // one projection shared by all views
    tracer.add(row);
    total += tokens_per_view[v];
  }
  const std::uint64_t token_params =
      class_token.numel() + position_embedding.numel() + (view_embedding.defined() ? view_embedding.numel() : 0);
  tracer.add({join_name(name, "tokens"), "embedding", {total - 1, d}, {total, d}, 0, token_params, 0});
  Shape s{total, d};
  for (std::size_t i = 0; i < blocks.size(); ++i) s = blocks[i]->trace(tracer, join_name(name, "blocks." + std::to_string(i)), s);
  s = norm->trace(tracer, join_name(name, "norm"), {1, d});
  head->trace(tracer, join_name(name, "head"), s);
}

template <class T>
FcAggregator<T>::FcAggregator(nn::Init<T>& init, std::size_t k, std::size_t f, std::size_t hidden, std::size_t classes)
    : slices(k), feature_dim(f) {
  fc1 = this->register_module("fc1", std::make_shared<nn::Linear<T>>(init, k * f, hidden));
  fc2 = this->register_module("fc2", std::make_shared<nn::Linear<T>>(init, hidden, classes));
}

template <class T>
Tensor<T> FcAggregator<T>::forward(const Tensor<T>& features) const {
  if (features.dim() != 2 || features.size(0) != slices || features.size(1) != feature_dim) {
    throw ShapeError("fc aggregator: expected features [" + std::to_string(slices) + "x" + std::to_string(feature_dim) +
                     "], got " + to_string(features.shape()));
  }
  return fc2->forward(relu(fc1->forward(reshape(features, {1, slices * feature_dim}))));
}

template <class T>
void FcAggregator<T>::trace(nn::Tracer& tracer, const std::string& name) const {
  auto s = fc1->trace(tracer, join_name(name, "fc1"), {1, slices * feature_dim});
  fc2->trace(tracer, join_name(name, "fc2"), s);
}

template <class T>
BiLstmAggregator<T>::BiLstmAggregator(nn::Init<T>& init, std::size_t k, std::size_t f, std::size_t hidden,
                                      std::size_t layers, std::size_t classes)
    : slices(k), feature_dim(f) {
  lstm = this->register_module("lstm", std::make_shared<nn::BiLstm<T>>(init, f, hidden, layers));
  head = this->register_module("head", std::make_shared<nn::Linear<T>>(init, 2 * hidden, classes));
}

template <class T>
Tensor<T> BiLstmAggregator<T>::forward(const Tensor<T>& features) const {
  if (features.dim() != 2 || features.size(0) != slices || features.size(1) != feature_dim) {
    throw ShapeError("bilstm aggregator: expected features [" + std::to_string(slices) + "x" +
                     std::to_string(feature_dim) + "], got " + to_string(features.shape()));
  }
  return head->forward(reshape(lstm->forward(features), {1, 2 * lstm->hidden_dim}));
}

template <class T>
void BiLstmAggregator<T>::trace(nn::Tracer& tracer, const std::string& name) const {
  auto s = lstm->trace(tracer, join_name(name, "lstm"), {slices, feature_dim});
  head->trace(tracer, join_name(name, "head"), {1, s[0]});
}

// ---------------------------------------------------------------------------
// Graph base

template <class T>
void ModelGraph<T>::finalize() {
  nn::Tracer tracer;
  trace(tracer);
  layers_ = tracer.rows();
  if (tracer.total_params() != this->parameter_count()) {
    throw Error("model graph: traced parameter total " + std::to_string(tracer.total_params()) +
                " differs from registered total " + std::to_string(this->parameter_count()));
  }
}

template <class T>
std::size_t ModelGraph<T>::check_batch(const Batch<T>& batch) const {
  std::size_t B = 0;
  for (View v : cfg_.views) {
    auto it = batch.find(v);
    if (it == batch.end()) throw ShapeError("model input lacks view '" + std::string(view_name(v)) + "'");
    const auto& g = cfg_.geometry_for(v);
    const auto& s = it->second.shape();
    const Shape want{g.count, cfg_.encoder.in_channels, g.height, g.width};
    if (s.size() != 5 || Shape(s.begin() + 1, s.end()) != want) {
      throw ShapeError("view '" + std::string(view_name(v)) + "': expected [B x " + text::format_dims(want) + "], got " +
                       to_string(s));
    }
    if (B != 0 && s[0] != B) throw ShapeError("views disagree on batch size");
    B = s[0];
  }
  if (B == 0) throw ShapeError("empty batch");
  return B;
}

// ---------------------------------------------------------------------------
// Slice-wise models

template <class T>
SliceModel<T>::SliceModel(const ModelConfig& cfg, nn::Init<T>& init) : ModelGraph<T>(cfg) {
  const auto& c = this->cfg_;
  const bool individual = c.family == Family::trf_multiview_individual;
  if (individual) {
    for (View v : c.views) {
      encoders.push_back(this->register_module("encoder_" + std::string(view_name(v)),
                                               std::make_shared<nn::ResNetEncoder<T>>(init, c.encoder, 2)));
    }
  } else {
    encoders.push_back(this->register_module("encoder", std::make_shared<nn::ResNetEncoder<T>>(init, c.encoder, 2)));
  }
  const std::size_t f = c.encoder.out_features();
  const std::size_t k = c.geometry_for(c.views[0]).count;
  switch (c.family) {
    case Family::fc_2d:
      fc = this->register_module("aggregator", std::make_shared<FcAggregator<T>>(init, k, f, c.fc_hidden, c.num_classes));
      break;
    case Family::bilstm_2d:
      bilstm = this->register_module(
          "aggregator", std::make_shared<BiLstmAggregator<T>>(init, k, f, c.lstm_hidden, c.lstm_layers, c.num_classes));
      break;
    default: {
      std::vector<std::size_t> tokens;
      for (View v : c.views) tokens.push_back(c.geometry_for(v).count);
      transformer = this->register_module(
          "aggregator", std::make_shared<TransformerAggregator<T>>(init, f, c.attention, c.trf_blocks, tokens, c.num_classes));
    }
  }
}

template <class T>
std::shared_ptr<nn::ResNetEncoder<T>> SliceModel<T>::encoder_for(View v) const {
  if (encoders.size() == 1) return encoders[0];
  const auto& views = this->cfg_.views;
  for (std::size_t i = 0; i < views.size(); ++i)
    if (views[i] == v) return encoders[i];
  throw ShapeError("model has no encoder for view '" + std::string(view_name(v)) + "'");
}

template <class T>
Tensor<T> SliceModel<T>::forward_slicewise(const Tensor<T>& slices, View view) {
  const auto& g = this->cfg_.geometry_for(view);
  const Shape want{g.count, this->cfg_.encoder.in_channels, g.height, g.width};
  if (slices.shape() != want) {
    throw ShapeError("slice stack: expected " + to_string(want) + ", got " + to_string(slices.shape()));
  }
  return encoder_for(view)->forward(slices);
}

template <class T>
Tensor<T> SliceModel<T>::aggregate(const std::vector<Tensor<T>>& features, Rng& rng) {
  if (transformer) return transformer->forward(features, rng);
  if (features.size() != 1) throw ShapeError("single-view aggregator given several views");
  return fc ? fc->forward(features[0]) : bilstm->forward(features[0]);
}

template <class T>
Tensor<T> SliceModel<T>::forward(const Batch<T>& batch, Rng& rng) {
  const std::size_t B = this->check_batch(batch);
  const auto& c = this->cfg_;
  std::vector<Tensor<T>> per_view;
  for (View v : c.views) {
    const auto& x = batch.at(v);
    const auto& g = c.geometry_for(v);
    auto flat = reshape(x, {B * g.count, c.encoder.in_channels, g.height, g.width});
    per_view.push_back(encoder_for(v)->forward(flat));
  }
  std::vector<Tensor<T>> logits;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<Tensor<T>> features;
    for (std::size_t i = 0; i < c.views.size(); ++i) {
      const std::size_t k = c.geometry_for(c.views[i]).count;
      features.push_back(B == 1 ? per_view[i] : narrow(per_view[i], 0, b * k, k));
    }
    logits.push_back(aggregate(features, rng));
  }
  return B == 1 ? logits[0] : concat(logits, 0);
}

template <class T>
void SliceModel<T>::trace(nn::Tracer& tracer) const {
  const auto& c = this->cfg_;
  for (std::size_t i = 0; i < c.views.size(); ++i) {
    const View v = c.views[i];
    const auto& g = c.geometry_for(v);
    const Shape in{g.count, c.encoder.in_channels, g.height, g.width};
    std::string name = encoders.size() > 1 ? "encoder_" + std::string(view_name(v)) : "encoder";
    if (encoders.size() == 1 && c.views.size() > 1) name += "[" + std::string(view_name(v)) + "]";
    nn::Tracer local;
    encoder_for(v)->trace(local, name, in);
    for (auto row : local.rows()) {
      if (encoders.size() == 1 && i > 0) row.params = 0;  // shared weights counted once
      tracer.add(row);
    }
  }
  if (transformer) transformer->trace(tracer, "aggregator");
  if (fc) fc->trace(tracer, "aggregator");
  if (bilstm) bilstm->trace(tracer, "aggregator");
}

// ---------------------------------------------------------------------------
// Volumetric models

template <class T>
Tensor<T> slices_to_volume(const Tensor<T>& x) {
  if (x.dim() != 5) throw ShapeError("expected [B x k x C x H x W], got " + to_string(x.shape()));
  const auto& s = x.shape();
  const std::size_t B = s[0], k = s[1], C = s[2], H = s[3], W = s[4];
  if (C == 1) return reshape(x, {B, 1, k, H, W});
  std::vector<Tensor<T>> channels;
  for (std::size_t c = 0; c < C; ++c) channels.push_back(reshape(narrow(x, 2, c, 1), {B, 1, k, H, W}));
  return concat(channels, 1);
}

template <class T>
VolumeModel<T>::VolumeModel(const ModelConfig& cfg, nn::Init<T>& init) : ModelGraph<T>(cfg) {
  const auto& e = this->cfg_.encoder;
  std::size_t features;
  if (this->cfg_.family == Family::conv3d) {
    encoder = this->register_module("encoder", std::make_shared<nn::ResNetEncoder<T>>(init, e, 3));
    features = encoder->out_features();
  } else {
    stem = this->register_module("stem", std::make_shared<nn::Conv2Plus1d<T>>(init, e.in_channels, e.stem_width, e.stem_stride));
    stem_bn = this->register_module("stem_bn", std::make_shared<nn::BatchNorm<T>>(init, e.stem_width));
    std::size_t channels = e.stem_width;
    for (std::size_t s = 0; s < e.widths.size(); ++s) {
      const std::size_t out = e.widths[s] * e.expansion;
      for (std::size_t b = 0; b < e.blocks[s]; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        stages.push_back(this->register_module("layer" + std::to_string(s + 1) + "." + std::to_string(b),
                                               std::make_shared<nn::R2Plus1dBlock<T>>(init, channels, out, stride)));
        channels = out;
      }
    }
    features = channels;
  }
  head = this->register_module("head", std::make_shared<nn::Linear<T>>(init, features, this->cfg_.num_classes));
}

template <class T>
Tensor<T> VolumeModel<T>::forward(const Batch<T>& batch, Rng&) {
  this->check_batch(batch);
  auto x = slices_to_volume(batch.at(this->cfg_.views[0]));
  if (encoder) return head->forward(encoder->forward(x));
  x = relu(stem_bn->forward(stem->forward(x)));
  for (auto& b : stages) x = b->forward(x);
  return head->forward(global_avg_pool(x));
}

template <class T>
void VolumeModel<T>::trace(nn::Tracer& tracer) const {
  const auto& c = this->cfg_;
  const auto& g = c.geometry_for(c.views[0]);
  const Shape in{1, c.encoder.in_channels, g.count, g.height, g.width};
  Shape s;
  if (encoder) {
    s = encoder->trace(tracer, "encoder", in);
  } else {
    s = stem->trace(tracer, "stem", in);
    s = stem_bn->trace(tracer, "stem_bn", s);
    for (std::size_t i = 0; i < stages.size(); ++i) s = stages[i]->trace(tracer, "stage." + std::to_string(i), s);
    tracer.add({"avgpool", "global_avg_pool", s, {s[0], s[1]}, 0, 0, 0});
    s = {s[0], s[1]};
  }
  head->trace(tracer, "head", s);
}

// ---------------------------------------------------------------------------

template <class T>
std::unique_ptr<ModelGraph<T>> build_model(const ModelConfig& cfg, bool meta) {
  cfg.validate();
  nn::Init<T> init(cfg.seed, meta);
  std::unique_ptr<ModelGraph<T>> model;
  if (is_volumetric(cfg.family)) {
    model = std::make_unique<VolumeModel<T>>(cfg, init);
  } else {
    model = std::make_unique<SliceModel<T>>(cfg, init);
  }
  if (!cfg.weights_path.empty() && !meta) {
    model->load_state(load_checkpoint(cfg.weights_path), false);
  }
  model->finalize();
  return model;
}

#define VF_INSTANTIATE_MODELS(T)                                                               \
  template class TransformerAggregator<T>;                                                     \
  template class FcAggregator<T>;                                                              \
  template class BiLstmAggregator<T>;                                                          \
  template class ModelGraph<T>;                                                                \
  template class SliceModel<T>;                                                                \
  template class VolumeModel<T>;                                                               \
  template std::unique_ptr<ModelGraph<T>> build_model<T>(const ModelConfig&, bool);            \
  template Tensor<T> slices_to_volume<T>(const Tensor<T>&);
VF_INSTANTIATE_MODELS(float)
VF_INSTANTIATE_MODELS(double)
#undef VF_INSTANTIATE_MODELS

}  // namespace volformer::models
