#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "volformer/cohort/cohort.hpp"
#include "volformer/data/volume.hpp"

namespace volformer::data {

struct SynthConfig {
  std::array<double, 3> class_proportions{0.730, 0.077, 0.193};  // none, slow, fast
  // Institutions with their subject shares; the last one is the usual hold-out.
  std::vector<std::pair<std::string, double>> institutions{{"A", 0.20}, {"B", 0.20}, {"C", 0.18}, {"D", 0.17}, {"E", 0.25}};
  // Per-knee rates of records that the cohort rules exclude.
  double rate_missing_klg = 0.005;
  double rate_klg4_baseline = 0.02;
  double rate_tka_baseline = 0.005;
  double rate_missing_bmi = 0.01;
  double rate_missing_mri = 0.0;
  double rate_indeterminate = 0.02;
  // Raw sagittal volume geometry (SI, AP, LR).
  std::array<std::size_t, 3> dims{72, 72, 20};
  std::array<float, 3> spacing{1.48f, 1.48f, 2.8f};
  double noise_sd = 12.0;

  // Throws ConfigError.
  void validate() const;
};

// Shape and appearance draws of one knee, enough to render its volume.
struct PhantomParams {
  int cls = 0;                 // drives the cartilage thickness
  bool left = false;           // mirrored along LR
  std::array<double, 3> femur_center{}, femur_radii{};
  std::array<double, 3> tibia_center{}, tibia_radii{};
  double cartilage = 0;        // shell thickness, in units of the bone radius
  double gain = 1;
  std::uint64_t noise_seed = 0;
};

struct SynthKnee {
  cohort::KneeRecord record;
  int planted_class = 0;
  std::string planted_exclusion;  // empty for knees that pass every rule
  PhantomParams phantom;
};

// Cartilage shell thickness for a class before per-knee jitter.
double cartilage_thickness(int cls);

// Two knees per subject, subjects "S00000", "S00001", ... Each subject draws
// from its own stream, so the cohort is a pure function of (n, seed, cfg).
std::vector<SynthKnee> synth_generate(std::size_t n_subjects, std::uint64_t seed, const SynthConfig& cfg = {});

// Raw f32 sagittal volume of one knee; id is the knee id.
Volume render_phantom(const SynthKnee& knee, const SynthConfig& cfg = {});

}  // namespace volformer::data
