#include "volformer/nn/module.hpp"

#include <cmath>
#include <map>

#include "volformer/error.hpp"

namespace volformer::nn {

std::uint64_t Tracer::total_macs() const {
  std::uint64_t t = 0;
  for (const auto& r : rows_) t += r.macs;
  return t;
}

std::uint64_t Tracer::total_params() const {
  std::uint64_t t = 0;
  for (const auto& r : rows_) t += r.params;
  return t;
}

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <class T>
Tensor<T> Init<T>::make(Shape shape, InitKind kind, std::size_t fan_in, std::size_t fan_out) {
  if (meta_) return Tensor<T>::meta(std::move(shape));
  auto t = Tensor<T>::zeros(std::move(shape), true);
  auto d = t.mutable_data();
  switch (kind) {
    case InitKind::he_normal: {
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& v : d) v = static_cast<T>(rng_.normal() * sd);
      break;
    }
    case InitKind::xavier_uniform: {
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : d) v = static_cast<T>(rng_.uniform(-a, a));
      break;
    }
    case InitKind::token_normal:
      for (auto& v : d) v = static_cast<T>(rng_.normal() * 0.02);
      break;
    case InitKind::zeros:
      break;
    case InitKind::ones:
      for (auto& v : d) v = T(1);
      break;
  }
  return t;
}

template <class T>
void Module<T>::collect(const std::string& prefix, bool buffers, std::vector<NamedTensor<T>>& out) const {
  for (const auto& [name, t] : buffers ? buffers_ : params_) out.emplace_back(join_name(prefix, name), t);
  for (const auto& [name, child] : children_) child->collect(join_name(prefix, name), buffers, out);
}

template <class T>
std::vector<NamedTensor<T>> Module<T>::named_parameters() const {
  std::vector<NamedTensor<T>> out;
  collect("", false, out);
  return out;
}

template <class T>
std::vector<NamedTensor<T>> Module<T>::named_buffers() const {
  std::vector<NamedTensor<T>> out;
  collect("", true, out);
  return out;
}

template <class T>
std::vector<Tensor<T>> Module<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [_, t] : named_parameters()) out.push_back(t);
  return out;
}

template <class T>
std::size_t Module<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto& [_, t] : named_parameters()) n += t.numel();
  return n;
}

template <class T>
void Module<T>::train(bool on) {
  training_ = on;
  for (auto& [_, child] : children_) child->train(on);
}

template <class T>
void Module<T>::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

template <class T>
std::vector<CheckpointEntry> Module<T>::state_dict() const {
  std::vector<CheckpointEntry> out;
  auto append = [&](const std::vector<NamedTensor<T>>& items) {
    for (const auto& [name, t] : items) {
      if (t.is_meta()) throw UsageError("state_dict: " + name + " has no storage");
      CheckpointEntry e{name, t.shape(), {}};
      e.values.reserve(t.numel());
      for (T v : t.data()) e.values.push_back(static_cast<float>(v));
      out.push_back(std::move(e));
    }
  };
  append(named_parameters());
  append(named_buffers());
  return out;
}

template <class T>
std::size_t Module<T>::load_state(const std::vector<CheckpointEntry>& entries, bool require_all) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto targets = named_parameters();
  for (auto& b : named_buffers()) targets.push_back(b);

  std::string mismatched;
  std::string missing;
  for (const auto& [name, t] : targets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      missing += (missing.empty() ? "" : ", ") + name;
      continue;
    }
    if (it->second->shape != t.shape()) {
      mismatched += (mismatched.empty() ? "" : ", ") + name + " (checkpoint " + to_string(it->second->shape) +
                    ", model " + to_string(t.shape()) + ")";
    }
  }
  if (!mismatched.empty()) throw LoadError("shape mismatch for tensors: " + mismatched);
  if (require_all && !missing.empty()) throw LoadError("checkpoint lacks tensors: " + missing);

  std::size_t loaded = 0;
  for (auto& [name, t] : targets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) continue;
    if (t.is_meta()) throw UsageError("load_state: " + name + " has no storage");
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(it->second->values[i]);
    ++loaded;
  }
  return loaded;
}

template <class T>
Tensor<T> Module<T>::register_parameter(std::string name, Tensor<T> t) {
  if (!t.is_meta()) t.set_requires_grad(true);
  params_.emplace_back(std::move(name), t);
  return t;
}

template <class T>
Tensor<T> Module<T>::register_buffer(std::string name, Tensor<T> t) {
  if (!t.is_meta()) t.set_requires_grad(false);
  buffers_.emplace_back(std::move(name), t);
  return t;
}

template class Init<float>;
template class Init<double>;
template class Module<float>;
template class Module<double>;

}  // namespace volformer::nn
