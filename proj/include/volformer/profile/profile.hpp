#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "volformer/error.hpp"
#include "volformer/models/model.hpp"

namespace volformer::profile {

// Applies an input spec to a config. "64x160x160" (slices x height x width)
// sets the shared slice geometry; "cor=160x116x88" sets one view. Several
// entries are separated by commas. Throws ConfigError.
models::ModelConfig apply_input_spec(models::ModelConfig cfg, const std::string& spec);
// Canonical spec of a config, one "view=KxHxW" entry per view.
std::string input_spec_of(const models::ModelConfig& cfg);

struct CostReport {
  std::string family;
  std::string input;
  std::vector<nn::LayerCost> rows;
  std::uint64_t total_macs = 0;
  std::uint64_t total_params = 0;
  std::uint64_t encoder_macs = 0;          // rows named encoder*
  std::uint64_t attention_score_macs = 0;  // 2*L^2*d terms, already inside total_macs
  std::vector<std::string> notes;
};

// Analytic counts of a single-sample forward pass. The model is built with
// shapes only, so full-scale configurations cost no parameter memory.
CostReport count_costs(const models::ModelConfig& cfg);

struct TimingReport {
  bool runnable = true;
  std::string reason;  // set when not runnable
  std::size_t warmup = 5;
  std::size_t runs = 30;
  double median_ms = 0;
  double iqr_ms = 0;
  std::vector<double> samples_ms;
  std::string hardware;
};

// Median and interquartile range of single-sample eval-mode forward passes
// after `warmup` discarded runs. Allocation failure is reported as "not
// runnable at this scale" instead of thrown.
TimingReport time_inference(const models::ModelConfig& cfg, std::size_t warmup = 5, std::size_t runs = 30);

// CPU model, logical core count and compiler.
std::string hardware_descriptor();

// JSON with per-layer rows and totals; the timing block is included when given.
std::string report_json(const CostReport& costs, const TimingReport* timing = nullptr);

}  // namespace volformer::profile
