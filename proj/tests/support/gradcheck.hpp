#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "volformer/ops.hpp"

namespace vftest {

using volformer::Tensor;
using TensorD = Tensor<double>;

struct GradCheck {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose +/- probes landed on different smooth pieces
};

// Central differences against reverse-mode gradients for every coordinate of
// every input. The error for one input tensor is
//   max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)
// so each tensor is judged relative to its own gradient scale. The scale is
// floored at 1e-6: some parameters (e.g. key biases, which cancel inside the
// softmax) have an exactly zero gradient and only round-off to compare.
inline GradCheck gradcheck(const std::function<TensorD()>& loss_fn, std::vector<TensorD> inputs, double step = 1e-3) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  loss_fn().backward();

  GradCheck out;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(t.numel(), 0.0);
    std::vector<double> numeric(t.numel(), 0.0);
    std::vector<bool> used(t.numel(), false);
    volformer::NoGradGuard guard;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      volformer::BranchProbe plus_probe, minus_probe;
      double plus, minus;
      t.mutable_data()[i] = saved + step;
      {
        volformer::BranchProbeScope scope(&plus_probe);
        plus = loss_fn().item();
      }
      t.mutable_data()[i] = saved - step;
      {
        volformer::BranchProbeScope scope(&minus_probe);
        minus = loss_fn().item();
      }
      t.mutable_data()[i] = saved;
      if (plus_probe.digest() != minus_probe.digest()) {
        ++out.skipped;
        continue;
      }
      numeric[i] = (plus - minus) / (2 * step);
      used[i] = true;
      ++out.checked;
    }
    double scale = 0.0, worst = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      if (!used[i]) continue;
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
      worst = std::max(worst, std::abs(analytic[i] - numeric[i]));
    }
    out.max_rel_err = std::max(out.max_rel_err, worst / std::max(scale, 1e-6));
  }
  return out;
}

inline TensorD random_tensor(volformer::Shape shape, volformer::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(volformer::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD::from_data(std::move(shape), std::move(v));
}

// Weighted sum with fixed random weights turns any output into a scalar whose
// gradient exercises every output coordinate. The weights use their own
// stream so they never coincide with inputs drawn from the same seed.
inline TensorD probe_loss(const TensorD& y, std::uint64_t seed) {
  volformer::Rng rng(volformer::Rng::mix(seed ^ 0x5DEECE66DULL));
  auto w = random_tensor(y.shape(), rng);
  return volformer::sum(volformer::mul(y, w));
}

}  // namespace vftest
