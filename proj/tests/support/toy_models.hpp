#pragma once

#include "volformer/models/model.hpp"

namespace vftest {

// Small configurations of every family, sized so that finite differences
// over all parameters stay cheap.
volformer::models::ModelConfig tiny_config(volformer::models::Family family, std::uint64_t seed);

// Random batch matching the config's per-view geometry.
template <class T>
volformer::models::Batch<T> random_batch(const volformer::models::ModelConfig& cfg, std::size_t batch,
                                          volformer::Rng& rng);

}  // namespace vftest
