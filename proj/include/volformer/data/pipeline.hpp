#pragma once

#include <array>
#include <string>
#include <vector>

#include "volformer/data/volume.hpp"
#include "volformer/rng.hpp"

namespace volformer::data {

struct PreprocessConfig {
  std::array<std::size_t, 3> crop{320, 320, 128};
  std::array<std::size_t, 3> factors{2, 2, 2};

  // Matches the synthetic phantoms: 72x72x20 raw -> 32x32x8.
  static PreprocessConfig toy() { return {{64, 64, 16}, {2, 2, 2}}; }
};

// Per-volume min-max mapping to integral [0, 255]; a constant input maps to 0.
std::vector<float> quantize(const std::vector<float>& values);

// Center crop, quantize, average-pool by integer factors and re-stretch the
// pooled values to [0, 255]. Output is u8 with spacing scaled by the factors.
// Throws ConfigError when the crop exceeds the volume or a factor does not
// divide the cropped extent.
Volume preprocess(const Volume& v, const PreprocessConfig& cfg);

// Permutes axes so that `view` is the slice axis (see view_layout) and
// resamples trilinearly to equal in-slice spacing with the voxel count of the
// input kept within rounding. An input already in that layout with equal
// in-slice spacing is returned unchanged.
Volume reproject(const Volume& v, View view);

// k slices of H x W in slice order, values in intensity units.
struct SliceStack {
  View view = View::sag;
  std::size_t k = 0, height = 0, width = 0;
  std::vector<float> data;
  std::string provenance;  // source id followed by " | step" entries

  float at(std::size_t s, std::size_t y, std::size_t x) const { return data[(s * height + y) * width + x]; }
};

// Takes k evenly spaced slices along the last axis of a volume in `view`'s
// layout (bin centers, so k equal to the depth takes every slice) and resizes
// them bilinearly when height x width differs from the in-slice extent.
// Throws ConfigError for k = 0 or k above the depth.
SliceStack extract_slices(const Volume& v, View view, std::size_t k, std::size_t height, std::size_t width);

struct AugmentPolicy {
  double max_shift_fraction = 0.05;  // of each in-slice extent
  double max_rotation_deg = 10.0;
  double gamma_min = 0.8;  // drawn log-uniformly
  double gamma_max = 1.25;

  static AugmentPolicy identity() { return {0.0, 0.0, 1.0, 1.0}; }
  // Throws ConfigError.
  void validate() const;
};

// One translation, rotation and gamma draw shared by every slice of the stack.
// Translation and rotation read outside the slice through mirror padding.
// Steps with a neutral draw are skipped, so the identity policy copies bits.
SliceStack augment(const SliceStack& s, Rng& rng, const AugmentPolicy& policy);

// The three deterministic steps of augment, exposed for testing.
SliceStack translate(const SliceStack& s, long dy, long dx);
SliceStack rotate(const SliceStack& s, double degrees);
SliceStack apply_gamma(const SliceStack& s, double gamma);

}  // namespace volformer::data
