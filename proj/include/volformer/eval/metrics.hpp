#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "volformer/error.hpp"

namespace volformer::eval {

// A metric that needs both classes was given only one.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

using Triple = std::array<double, 3>;  // p_none, p_slow, p_fast

struct PredictionSet {
  std::vector<std::string> knee_ids;
  std::vector<Triple> probs;
  std::vector<int> labels;  // 0 none, 1 slow, 2 fast

  std::size_t size() const { return probs.size(); }
  // Throws UsageError on length mismatch, bad labels or triples not summing to 1.
  void validate() const;
  std::vector<double> pooled() const;      // p_slow + p_fast per knee
  std::vector<int> binary_labels() const;  // label > 0
  std::vector<int> predicted() const;      // argmax, lowest class on ties
};

// Probability of progression within the final horizon.
double pool_progression(const Triple& p);

// Step-wise area under the precision-recall curve: sum of recall increments
// times precision, one threshold per distinct score.
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);
// Mann-Whitney form: P(score+ > score-) + P(equal) / 2.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct Confusion {
  std::array<std::array<std::size_t, 3>, 3> matrix{};  // rows: true class
  double balanced_accuracy = 0;                         // mean recall over classes with support
};
Confusion confusion(const std::vector<int>& predicted, const std::vector<int>& labels);

// Mean of the probability triples over models, knee by knee.
std::vector<Triple> ensemble_mean(const std::vector<std::vector<Triple>>& per_model);

struct Spread {
  double mean = 0;
  double std = 0;
  std::size_t draws = 0;
  std::size_t redrawn = 0;  // single-class resamples that were discarded
};

using BinaryMetric = std::function<double(const std::vector<double>&, const std::vector<int>&)>;
// Knee-level bootstrap with replacement. Throws ConfigError for n_boot < 100.
Spread bootstrap_spread(const BinaryMetric& metric, const std::vector<double>& scores, const std::vector<int>& labels,
                        std::size_t n_boot, std::uint64_t seed);

struct RocPoint {
  double threshold, fpr, tpr;
};
struct PrPoint {
  double threshold, recall, precision;
};
// Thresholds descending, tied scores merged. ROC starts at (0, 0) with an
// infinite threshold. PR starts at recall 0 with the precision of the
// top-ranked score group.
std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);
std::vector<PrPoint> pr_curve(const std::vector<double>& scores, const std::vector<int>& labels);
double trapezoid_area(const std::vector<RocPoint>& curve);

}  // namespace volformer::eval
