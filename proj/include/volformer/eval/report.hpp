#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "volformer/eval/metrics.hpp"

namespace volformer::eval {

inline constexpr const char* kSpreadMethod = "bootstrap(assumption)";

struct EvalReport {
  std::size_t knees = 0;
  std::size_t positives = 0;  // slow or fast
  double prevalence = 0;
  double ap = 0;
  Spread ap_spread;
  double roc_auc = 0;
  Spread roc_auc_spread;
  Confusion confusion;
  std::size_t n_boot = 1000;
  std::uint64_t seed = 0;
  std::vector<RocPoint> roc;
  std::vector<PrPoint> pr;
};

// Pooled-progression AP and AUC with bootstrap spread, plus the 3-class
// confusion matrix of the argmax predictions.
EvalReport evaluate_predictions(const PredictionSet& preds, std::size_t n_boot = 1000, std::uint64_t seed = 0);

// Pretty-printed JSON without curve points (those go to the CSV files).
std::string report_json(const EvalReport& r);

// roc.csv (threshold,fpr,tpr), pr.csv (threshold,recall,precision) and
// confusion.csv (true class rows) inside `dir`.
void write_curves(const EvalReport& r, const std::string& dir);

// knee_id,label,p_none,p_slow,p_fast
std::string predictions_csv(const PredictionSet& preds);
PredictionSet parse_predictions_csv(const std::string& text, const std::string& source);

}  // namespace volformer::eval
