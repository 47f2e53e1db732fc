#pragma once

#include <map>
#include <memory>
#include <vector>

#include "volformer/models/config.hpp"
#include "volformer/nn/blocks.hpp"

namespace volformer::models {

// One input tensor per configured view, each [B x k x C x H x W].
template <class T>
using Batch = std::map<View, Tensor<T>>;

// Projects slice features to tokens, prepends a class token, adds learned
// positional (and, with several views, view) embeddings, then runs pre-norm
// Transformer blocks and classifies the final class-token state.
template <class T>
class TransformerAggregator : public nn::Module<T> {
 public:
  TransformerAggregator(nn::Init<T>& init, std::size_t features, const nn::AttentionConfig& cfg, std::size_t blocks,
                        std::vector<std::size_t> tokens_per_view, std::size_t classes);

  // One [k_v x f] feature matrix per view -> logits [1 x classes].
  Tensor<T> forward(const std::vector<Tensor<T>>& features, Rng& rng);
  void trace(nn::Tracer& tracer, const std::string& name) const;

  std::size_t feature_dim;
  std::vector<std::size_t> tokens_per_view;
  std::shared_ptr<nn::Linear<T>> projection;
  Tensor<T> class_token;          // [1 x d]
  Tensor<T> position_embedding;   // [(1 + total tokens) x d]
  Tensor<T> view_embedding;       // [views x d], only with several views
  std::vector<std::shared_ptr<nn::TransformerBlock<T>>> blocks;
  std::shared_ptr<nn::LayerNorm<T>> norm;
  std::shared_ptr<nn::Linear<T>> head;
};

// Flattens [k x f] slice-major (all features of slice 0 first) and applies
// FC -> ReLU -> FC.
template <class T>
class FcAggregator : public nn::Module<T> {
 public:
  FcAggregator(nn::Init<T>& init, std::size_t slices, std::size_t features, std::size_t hidden, std::size_t classes);

  Tensor<T> forward(const Tensor<T>& features) const;
  void trace(nn::Tracer& tracer, const std::string& name) const;

  std::size_t slices;
  std::size_t feature_dim;
  std::shared_ptr<nn::Linear<T>> fc1, fc2;
};

template <class T>
class BiLstmAggregator : public nn::Module<T> {
 public:
  BiLstmAggregator(nn::Init<T>& init, std::size_t slices, std::size_t features, std::size_t hidden, std::size_t layers,
                   std::size_t classes);

  Tensor<T> forward(const Tensor<T>& features) const;
  void trace(nn::Tracer& tracer, const std::string& name) const;

  std::size_t slices;
  std::size_t feature_dim;
  std::shared_ptr<nn::BiLstm<T>> lstm;
  std::shared_ptr<nn::Linear<T>> head;
};

// Instantiated architecture. The layer list is traced at build time, which
// validates every shape hand-off before any forward pass runs.
template <class T>
class ModelGraph : public nn::Module<T> {
 public:
  explicit ModelGraph(ModelConfig cfg) : cfg_(std::move(cfg)) {}

  const ModelConfig& config() const { return cfg_; }
  // Logits [B x classes].
  virtual Tensor<T> forward(const Batch<T>& batch, Rng& rng) = 0;
  // Cost rows for a batch of one sample.
  virtual void trace(nn::Tracer& tracer) const = 0;
  const std::vector<nn::LayerCost>& layers() const { return layers_; }
  void finalize();

 protected:
  // Checks presence and shape of every configured view; returns the batch size.
  std::size_t check_batch(const Batch<T>& batch) const;
  ModelConfig cfg_;
  std::vector<nn::LayerCost> layers_;
};

// Slice-wise families: a 2-D encoder per view (or one shared) feeding one of
// the aggregators.
template <class T>
class SliceModel : public ModelGraph<T> {
 public:
  SliceModel(const ModelConfig& cfg, nn::Init<T>& init);

  Tensor<T> forward(const Batch<T>& batch, Rng& rng) override;
  void trace(nn::Tracer& tracer) const override;

  // [k x C x H x W] -> [k x f] using the encoder of `view`.
  Tensor<T> forward_slicewise(const Tensor<T>& slices, View view = View::sag);
  // Features of one sample, one [k_v x f] matrix per view -> logits [1 x 3].
  Tensor<T> aggregate(const std::vector<Tensor<T>>& features, Rng& rng);

  std::shared_ptr<nn::ResNetEncoder<T>> encoder_for(View v) const;

  std::vector<std::shared_ptr<nn::ResNetEncoder<T>>> encoders;  // one, or one per view
  std::shared_ptr<TransformerAggregator<T>> transformer;
  std::shared_ptr<FcAggregator<T>> fc;
  std::shared_ptr<BiLstmAggregator<T>> bilstm;
};

// Volumetric families: the slice stack is treated as depth of a 3-D volume.
template <class T>
class VolumeModel : public ModelGraph<T> {
 public:
  VolumeModel(const ModelConfig& cfg, nn::Init<T>& init);

  Tensor<T> forward(const Batch<T>& batch, Rng& rng) override;
  void trace(nn::Tracer& tracer) const override;

  std::shared_ptr<nn::ResNetEncoder<T>> encoder;  // conv3d
  std::shared_ptr<nn::Conv2Plus1d<T>> stem;       // conv2plus1d
  std::shared_ptr<nn::BatchNorm<T>> stem_bn;
  std::vector<std::shared_ptr<nn::R2Plus1dBlock<T>>> stages;
  std::shared_ptr<nn::Linear<T>> head;
};

// Validates the config, initializes parameters deterministically from
// cfg.seed and, when cfg.weights_path is set, overwrites every tensor whose
// name matches the checkpoint. With `meta` the graph carries shapes only
// (profiling of full-scale configurations).
template <class T>
std::unique_ptr<ModelGraph<T>> build_model(const ModelConfig& cfg, bool meta = false);

// Rearranges [B x k x C x H x W] into [B x C x k x H x W].
template <class T>
Tensor<T> slices_to_volume(const Tensor<T>& x);

}  // namespace volformer::models
