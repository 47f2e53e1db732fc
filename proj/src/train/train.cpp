#include "volformer/train/train.hpp"

#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "volformer/binary_io.hpp"
#include "volformer/cohort/cohort.hpp"
#include "volformer/ops.hpp"
#include "volformer/text.hpp"

namespace volformer::train {

namespace {

std::string num(double v) { return std::isnan(v) ? "nan" : text::format_double(v); }

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (warmup_epochs >= epochs) throw ConfigError("train: warmup_epochs must be below epochs");
  if (!(lr_start > 0) || !(lr_main > 0)) throw ConfigError("train: learning rates must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("train: weight_decay must be non-negative");
  if (!(focal_gamma >= 0)) throw ConfigError("train: focal_gamma must be non-negative");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (snapshot_metric != "average_precision") throw ConfigError("train: snapshot_metric must be average_precision");
  if (!(grad_clip >= 0)) throw ConfigError("train: grad_clip must be non-negative");
  policy.validate();
}

TrainConfig TrainConfig::parse(const std::string& content, const std::string& source) {
  TrainConfig cfg;
  using Setter = std::function<bool(std::string_view)>;
  const std::map<std::string, Setter> setters{
      {"epochs", [&](std::string_view s) { return text::parse_size(s, cfg.epochs); }},
      {"warmup_epochs", [&](std::string_view s) { return text::parse_size(s, cfg.warmup_epochs); }},
      {"lr_start", [&](std::string_view s) { return text::parse_double(s, cfg.lr_start); }},
      {"lr_main", [&](std::string_view s) { return text::parse_double(s, cfg.lr_main); }},
      {"weight_decay", [&](std::string_view s) { return text::parse_double(s, cfg.weight_decay); }},
      {"focal_gamma", [&](std::string_view s) { return text::parse_double(s, cfg.focal_gamma); }},
      {"batch_size", [&](std::string_view s) { return text::parse_size(s, cfg.batch_size); }},
      {"seed", [&](std::string_view s) { return text::parse_u64(s, cfg.seed); }},
      {"snapshot_metric", [&](std::string_view s) { cfg.snapshot_metric = std::string(s); return true; }},
      {"grad_clip", [&](std::string_view s) { return text::parse_double(s, cfg.grad_clip); }},
      {"balance", [&](std::string_view s) { return text::parse_bool(s, cfg.balance); }},
      {"augment", [&](std::string_view s) { return text::parse_bool(s, cfg.augment); }},
      {"augment.max_shift_fraction", [&](std::string_view s) { return text::parse_double(s, cfg.policy.max_shift_fraction); }},
      {"augment.max_rotation_deg", [&](std::string_view s) { return text::parse_double(s, cfg.policy.max_rotation_deg); }},
      {"augment.gamma_min", [&](std::string_view s) { return text::parse_double(s, cfg.policy.gamma_min); }},
      {"augment.gamma_max", [&](std::string_view s) { return text::parse_double(s, cfg.policy.gamma_max); }},
  };
  std::set<std::string> seen;
  std::istringstream in(content);
  std::string raw;
  for (std::size_t number = 1; std::getline(in, raw); ++number) {
    auto line = std::string_view(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = text::trim(line);
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(number) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key(text::trim(line.substr(0, eq)));
    const auto value = text::trim(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    if (!it->second(value)) throw ConfigError(where + "invalid value '" + std::string(value) + "' for " + key);
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

TrainConfig TrainConfig::load(const std::string& path) {
  const auto bytes = binary::read_file(path);
  return parse(std::string(bytes.begin(), bytes.end()), path);
}

std::string TrainConfig::dump() const {
  std::ostringstream o;
  o << "epochs = " << epochs << "\n"
    << "warmup_epochs = " << warmup_epochs << "\n"
    << "lr_start = " << num(lr_start) << "\n"
    << "lr_main = " << num(lr_main) << "\n"
    << "weight_decay = " << num(weight_decay) << "\n"
    << "focal_gamma = " << num(focal_gamma) << "\n"
    << "batch_size = " << batch_size << "\n"
    << "seed = " << seed << "\n"
    << "snapshot_metric = " << snapshot_metric << "\n"
    << "grad_clip = " << num(grad_clip) << "\n"
    << "balance = " << (balance ? "true" : "false") << "\n"
    << "augment = " << (augment ? "true" : "false") << "\n"
    << "augment.max_shift_fraction = " << num(policy.max_shift_fraction) << "\n"
    << "augment.max_rotation_deg = " << num(policy.max_rotation_deg) << "\n"
    << "augment.gamma_min = " << num(policy.gamma_min) << "\n"
    << "augment.gamma_max = " << num(policy.gamma_max) << "\n";
  return o.str();
}

double lr_schedule(const TrainConfig& cfg, std::size_t epoch) {
  if (epoch >= cfg.epochs) throw UsageError("lr_schedule: epoch " + std::to_string(epoch) + " out of range");
  if (epoch >= cfg.warmup_epochs) return cfg.lr_main;
  return cfg.lr_start + (cfg.lr_main - cfg.lr_start) * (static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs));
}

template <class T>
void adam_step(const std::vector<nn::NamedTensor<T>>& params, AdamState& state, double lr, double weight_decay,
               double grad_clip) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adam_step: optimizer state does not match the parameters");
  double norm2 = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (state.m[i].size() != p.numel()) throw UsageError("adam_step: state of " + name + " has the wrong size");
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw DivergenceError("non-finite gradient in " + name);
      norm2 += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double clip = grad_clip > 0 && std::sqrt(norm2) > grad_clip ? grad_clip / std::sqrt(norm2) : 1.0;
  ++state.step;
  const double c1 = 1 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].second;
    auto data = p.mutable_data();
    const bool has = p.has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      double x = static_cast<double>(data[j]);
      x -= lr * weight_decay * x;
      const double g = has ? clip * static_cast<double>(p.grad()[j]) : 0.0;
      m[j] = kAdamBeta1 * m[j] + (1 - kAdamBeta1) * g;
      v[j] = kAdamBeta2 * v[j] + (1 - kAdamBeta2) * g * g;
      x -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + kAdamEps);
      data[j] = static_cast<T>(x);
    }
  }
}

Sample make_sample(const data::Volume& sag, std::string knee_id, int label, const models::ModelConfig& cfg) {
  Sample s{std::move(knee_id), label, {}};
  for (View v : cfg.views) {
    const auto& g = cfg.geometry_for(v);
    if (v == View::sag) {
      s.stacks.emplace(v, data::extract_slices(sag, v, g.count, g.height, g.width));
    } else {
      s.stacks.emplace(v, data::extract_slices(data::reproject(sag, v), v, g.count, g.height, g.width));
    }
  }
  return s;
}

template <class T>
models::Batch<T> make_batch(const models::ModelConfig& cfg, const std::vector<const Sample*>& samples,
                            const data::AugmentPolicy* augment, Rng& rng) {
  if (samples.empty()) throw UsageError("make_batch: no samples");
  const std::size_t B = samples.size(), C = cfg.encoder.in_channels;
  std::map<View, std::vector<T>> buffers;
  for (View v : cfg.views) {
    const auto& g = cfg.geometry_for(v);
    buffers[v].reserve(B * g.count * C * g.height * g.width);
  }
  for (const Sample* s : samples) {
    for (View v : cfg.views) {
      auto it = s->stacks.find(v);
      if (it == s->stacks.end()) throw ShapeError("sample " + s->knee_id + " has no " + std::string(view_name(v)) + " slices");
      const auto& g = cfg.geometry_for(v);
      const auto stack = augment ? data::augment(it->second, rng, *augment) : it->second;
      if (stack.k != g.count || stack.height != g.height || stack.width != g.width) {
        throw ShapeError("sample " + s->knee_id + ": " + std::string(view_name(v)) + " slices are " +
                         text::format_dims({stack.k, stack.height, stack.width}) + ", model expects " +
                         text::format_dims({g.count, g.height, g.width}));
      }
      auto& out = buffers[v];
      const std::size_t plane = g.height * g.width;
      for (std::size_t k = 0; k < g.count; ++k)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < plane; ++i) out.push_back(static_cast<T>(stack.data[k * plane + i] / 127.5f - 1.0f));
    }
  }
  models::Batch<T> batch;
  for (View v : cfg.views) {
    const auto& g = cfg.geometry_for(v);
    batch.emplace(v, Tensor<T>::from_data({B, g.count, C, g.height, g.width}, std::move(buffers[v])));
  }
  return batch;
}

template <class T>
std::vector<eval::Triple> predict(models::ModelGraph<T>& model, const std::vector<Sample>& samples, std::size_t batch_size) {
  NoGradGuard guard;
  const bool was_training = model.is_training();
  model.eval();
  Rng unused(0);
  std::vector<eval::Triple> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<const Sample*> chunk;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) chunk.push_back(&samples[i]);
    const auto probs = softmax(model.forward(make_batch<T>(model.config(), chunk, nullptr, unused), unused), 1);
    const auto d = probs.data();
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      eval::Triple t{static_cast<double>(d[b * 3]), static_cast<double>(d[b * 3 + 1]), static_cast<double>(d[b * 3 + 2])};
      const double sum = t[0] + t[1] + t[2];
      for (auto& x : t) x /= sum;
      out.push_back(t);
    }
  }
  model.train(was_training);
  return out;
}

namespace {

std::pair<double, double> validation_metrics(const std::vector<eval::Triple>& probs, const std::vector<Sample>& val) {
  std::vector<double> scores;
  std::vector<int> y;
  for (std::size_t i = 0; i < val.size(); ++i) {
    scores.push_back(probs[i][1] + probs[i][2]);
    y.push_back(val[i].label > 0 ? 1 : 0);
  }
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  try {
    return {eval::average_precision(scores, y), eval::roc_auc(scores, y)};
  } catch (const eval::UndefinedMetricError&) {
    return {nan, nan};
  }
}

}  // namespace

template <class T>
FoldResult train_fold(const models::ModelConfig& cfg, const std::vector<Sample>& train, const std::vector<Sample>& val,
                      const TrainConfig& tcfg, std::size_t fold, const EpochCallback& on_epoch) {
  tcfg.validate();
  if (train.empty()) throw ConfigError("train_fold: empty training split");
  Rng stream(Rng::mix(tcfg.seed ^ Rng::mix(fold + 1)));
  auto model_cfg = cfg;
  model_cfg.seed = Rng::mix(cfg.seed ^ stream.next_u64());
  auto model = models::build_model<T>(model_cfg);
  Rng order_rng = stream.fork(1), augment_rng = stream.fork(2), dropout_rng = stream.fork(3);

  std::vector<std::size_t> indices(train.size());
  std::iota(indices.begin(), indices.end(), 0);
  std::vector<int> labels;
  for (const auto& s : train) labels.push_back(s.label);

  const auto params = model->named_parameters();
  AdamState adam;
  FoldResult result;
  bool have_snapshot = false;
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_schedule(tcfg, epoch);
    auto order = indices;
    if (tcfg.balance) {
      try {
        order = cohort::resample_balance(indices, labels, order_rng);
      } catch (const ConfigError& e) {
        throw ConfigError("fold " + std::to_string(fold) + " training split: " + e.what());
      }
    } else {
      order_rng.shuffle(order);
    }
    model->train();
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      std::vector<const Sample*> chunk;
      std::vector<int> targets;
      for (std::size_t i = start; i < std::min(order.size(), start + tcfg.batch_size); ++i) {
        chunk.push_back(&train[order[i]]);
        targets.push_back(train[order[i]].label);
      }
      const auto batch = make_batch<T>(model_cfg, chunk, tcfg.augment ? &tcfg.policy : nullptr, augment_rng);
      const auto probs = softmax(model->forward(batch, dropout_rng), 1);
      const auto loss = focal_loss(probs, targets, tcfg.focal_gamma, &result.clamped);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw TrainingDiverged("training loss is not finite at epoch " + std::to_string(epoch) + ", fold " +
                                   std::to_string(fold),
                               result.history);
      }
      model->zero_grad();
      loss.backward();
      try {
        adam_step(params, adam, rec.lr, tcfg.weight_decay, tcfg.grad_clip);
      } catch (const DivergenceError& e) {
        throw TrainingDiverged(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", fold " +
                                   std::to_string(fold),
                               result.history);
      }
      loss_sum += value * static_cast<double>(chunk.size());
    }
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    if (!val.empty()) {
      std::tie(rec.val_ap, rec.val_auc) = validation_metrics(predict(*model, val), val);
    } else {
      rec.val_ap = rec.val_auc = std::numeric_limits<double>::quiet_NaN();
    }
    // While no epoch has a defined AP the latest one is kept.
    const bool better = !have_snapshot || std::isnan(result.best.val_ap) || rec.val_ap > result.best.val_ap;
    if (better) {
      result.best = {epoch, rec.val_ap, model->state_dict()};
      have_snapshot = true;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

template <class T>
eval::PredictionSet ensemble_predict(const models::ModelConfig& cfg, const std::vector<Snapshot>& snapshots,
                                     const std::vector<Sample>& samples, std::size_t batch_size) {
  if (snapshots.empty()) throw UsageError("ensemble_predict: no snapshots");
  std::vector<std::vector<eval::Triple>> per_model;
  for (const auto& snap : snapshots) {
    auto model = models::build_model<T>(cfg);
    model->load_state(snap.state, true);
    per_model.push_back(predict(*model, samples, batch_size));
  }
  eval::PredictionSet out;
  out.probs = eval::ensemble_mean(per_model);
  for (const auto& s : samples) {
    out.knee_ids.push_back(s.knee_id);
    out.labels.push_back(s.label);
  }
  return out;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,lr,train_loss,val_ap,val_auc\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + num(r.lr) + "," + num(r.train_loss) + "," + num(r.val_ap) + "," +
           num(r.val_auc) + "\n";
  }
  return out;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr first;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lock(mu);
          if (next >= n || first) return;
          i = next++;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first) std::rethrow_exception(first);
}

#define VF_INSTANTIATE_TRAIN(T)                                                                                     \
  template void adam_step(const std::vector<nn::NamedTensor<T>>&, AdamState&, double, double, double);              \
  template models::Batch<T> make_batch(const models::ModelConfig&, const std::vector<const Sample*>&,               \
                                       const data::AugmentPolicy*, Rng&);                                           \
  template std::vector<eval::Triple> predict(models::ModelGraph<T>&, const std::vector<Sample>&, std::size_t);      \
  template FoldResult train_fold<T>(const models::ModelConfig&, const std::vector<Sample>&,                         \
                                    const std::vector<Sample>&, const TrainConfig&, std::size_t,                    \
                                    const EpochCallback&);                                                          \
  template eval::PredictionSet ensemble_predict<T>(const models::ModelConfig&, const std::vector<Snapshot>&,        \
                                                   const std::vector<Sample>&, std::size_t);

VF_INSTANTIATE_TRAIN(float)
VF_INSTANTIATE_TRAIN(double)

}  // namespace volformer::train
