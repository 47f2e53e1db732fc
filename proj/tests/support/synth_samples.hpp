#pragma once

#include <vector>

#include "volformer/data/synth.hpp"
#include "volformer/train/train.hpp"

namespace vftest {

// Renders, preprocesses (toy geometry) and slices the knees that pass every
// cohort rule, labeled with their planted class.
std::vector<volformer::train::Sample> synth_samples(const std::vector<volformer::data::SynthKnee>& knees,
                                                    const volformer::models::ModelConfig& cfg);

// `per_class` knees of each class drawn from a synthetic cohort, in cohort order.
std::vector<volformer::data::SynthKnee> pick_per_class(std::size_t per_class, std::uint64_t seed);

}  // namespace vftest
