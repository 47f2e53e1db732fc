#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "volformer/data/pipeline.hpp"
#include "volformer/eval/metrics.hpp"
#include "volformer/models/model.hpp"

namespace volformer::train {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 5;
  double lr_start = 1e-5;
  double lr_main = 1e-4;
  double weight_decay = 1e-4;
  double focal_gamma = 2.0;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::string snapshot_metric = "average_precision";
  double grad_clip = 0;  // global L2 norm; 0 disables
  bool balance = true;   // oversample minority classes every epoch
  bool augment = true;
  data::AugmentPolicy policy;

  // Throws ConfigError.
  void validate() const;
  // Same `key = value` format as model configs.
  static TrainConfig parse(const std::string& text, const std::string& source);
  static TrainConfig load(const std::string& path);
  std::string dump() const;
};

// Linear warmup from lr_start to lr_main over warmup_epochs, then constant.
double lr_schedule(const TrainConfig& cfg, std::size_t epoch);

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

// One Adam update with decoupled weight decay (p -= lr * wd * p first).
// Parameters without a gradient are treated as having a zero gradient.
// Throws DivergenceError naming the first tensor with a non-finite gradient.
template <class T>
void adam_step(const std::vector<nn::NamedTensor<T>>& params, AdamState& state, double lr, double weight_decay,
               double grad_clip = 0);

// One knee ready for the model: a slice stack per configured view.
struct Sample {
  std::string knee_id;
  int label = 0;
  std::map<View, data::SliceStack> stacks;
};

// Reprojects a preprocessed sagittal volume into every configured view and
// extracts that view's slices.
Sample make_sample(const data::Volume& sag, std::string knee_id, int label, const models::ModelConfig& cfg);

// Per-view [B x k x C x H x W] tensors with intensities mapped to [-1, 1]
// (x / 127.5 - 1), grayscale repeated over the encoder's input channels.
// With `augment`, each sample draws its own augmentation from `rng` in order.
template <class T>
models::Batch<T> make_batch(const models::ModelConfig& cfg, const std::vector<const Sample*>& samples,
                            const data::AugmentPolicy* augment, Rng& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_ap = 0;   // NaN when the validation split holds a single class
  double val_auc = 0;
};

struct Snapshot {
  std::size_t epoch = 0;
  double val_ap = 0;
  std::vector<CheckpointEntry> state;
};

struct FoldResult {
  std::vector<EpochRecord> history;
  Snapshot best;
  std::uint64_t clamped = 0;  // focal-loss probabilities raised to the floor
};

// Non-finite training loss; carries the epochs completed before it.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, std::vector<EpochRecord> history)
      : DivergenceError(what), history(std::move(history)) {}
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains a fresh model on `train` and keeps the parameters of the epoch with
// the highest validation AP (earliest on ties; a NaN AP ranks lowest, and
// if every epoch is NaN the final one is kept). Initialization, resampling,
// augmentation and dropout all draw from streams derived from
// (cfg.seed, train_cfg.seed, fold), so the result is a pure function of them.
template <class T>
FoldResult train_fold(const models::ModelConfig& cfg, const std::vector<Sample>& train, const std::vector<Sample>& val,
                      const TrainConfig& train_cfg, std::size_t fold, const EpochCallback& on_epoch = {});

// Class probabilities per sample, un-augmented, in eval mode.
template <class T>
std::vector<eval::Triple> predict(models::ModelGraph<T>& model, const std::vector<Sample>& samples,
                                  std::size_t batch_size = 8);

// Loads every snapshot into a fresh model and averages their predictions.
template <class T>
eval::PredictionSet ensemble_predict(const models::ModelConfig& cfg, const std::vector<Snapshot>& snapshots,
                                     const std::vector<Sample>& samples, std::size_t batch_size = 8);

// epoch,lr,train_loss,val_ap,val_auc
std::string history_csv(const std::vector<EpochRecord>& history);

// Runs fn(0..n-1) on up to `workers` threads. The first exception thrown by
// any task is rethrown after all threads have joined.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace volformer::train
