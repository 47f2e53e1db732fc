#include "synth_samples.hpp"

#include <array>

namespace vftest {

using namespace volformer;

std::vector<train::Sample> synth_samples(const std::vector<data::SynthKnee>& knees, const models::ModelConfig& cfg) {
  std::vector<train::Sample> out;
  for (const auto& k : knees) {
    if (!k.planted_exclusion.empty()) continue;
    const auto volume = data::preprocess(data::render_phantom(k), data::PreprocessConfig::toy());
    out.push_back(train::make_sample(volume, k.record.knee_id(), k.planted_class, cfg));
  }
  return out;
}

std::vector<data::SynthKnee> pick_per_class(std::size_t per_class, std::uint64_t seed) {
  std::vector<data::SynthKnee> out;
  std::array<std::size_t, 3> taken{};
  for (std::size_t subjects = 64;; subjects *= 2) {
    out.clear();
    taken = {};
    for (auto& k : data::synth_generate(subjects, seed)) {
      if (!k.planted_exclusion.empty() || taken[k.planted_class] == per_class) continue;
      ++taken[k.planted_class];
      out.push_back(std::move(k));
    }
    if (out.size() == 3 * per_class) return out;
  }
}

}  // namespace vftest
