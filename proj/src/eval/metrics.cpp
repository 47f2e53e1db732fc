#include "volformer/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "volformer/rng.hpp"

namespace volformer::eval {

namespace {

struct Group {
  double score;
  std::size_t pos = 0, neg = 0;
};

// Tie groups in descending score order.
std::vector<Group> ranked_groups(const std::vector<double>& scores, const std::vector<int>& labels, std::size_t& pos,
                                 std::size_t& neg, const char* metric) {
  if (scores.size() != labels.size()) throw UsageError(std::string(metric) + ": scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  for (double s : scores)
    if (std::isnan(s)) throw UsageError(std::string(metric) + ": NaN score");
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<Group> groups;
  pos = neg = 0;
  for (std::size_t i : order) {
    if (labels[i] != 0 && labels[i] != 1) throw UsageError(std::string(metric) + ": labels must be 0 or 1");
    if (groups.empty() || groups.back().score != scores[i]) groups.push_back({scores[i]});
    (labels[i] ? groups.back().pos : groups.back().neg) += 1;
    (labels[i] ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0) {
    throw UndefinedMetricError(std::string(metric) + " is undefined: labels contain a single class");
  }
  return groups;
}

}  // namespace

void PredictionSet::validate() const {
  if (labels.size() != probs.size() || (!knee_ids.empty() && knee_ids.size() != probs.size())) {
    throw UsageError("prediction set: ids, probabilities and labels differ in length");
  }
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 2) throw UsageError("prediction set: label out of range");
    pool_progression(probs[i]);
  }
}

double pool_progression(const Triple& p) {
  for (double x : p)
    if (!(x >= 0 && x <= 1)) throw UsageError("probability triple entry outside [0, 1]");
  if (std::abs(p[0] + p[1] + p[2] - 1) > 1e-6) throw UsageError("probability triple does not sum to 1");
  return p[1] + p[2];
}

std::vector<double> PredictionSet::pooled() const {
  std::vector<double> out;
  out.reserve(probs.size());
  for (const auto& p : probs) out.push_back(pool_progression(p));
  return out;
}

std::vector<int> PredictionSet::binary_labels() const {
  std::vector<int> out;
  for (int l : labels) out.push_back(l > 0 ? 1 : 0);
  return out;
}

std::vector<int> PredictionSet::predicted() const {
  std::vector<int> out;
  for (const auto& p : probs) out.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
  return out;
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::size_t pos = 0, neg = 0;
  const auto groups = ranked_groups(scores, labels, pos, neg, "average precision");
  double ap = 0;
  std::size_t tp = 0, fp = 0;
  for (const auto& g : groups) {
    tp += g.pos;
    fp += g.neg;
    ap += (static_cast<double>(g.pos) / static_cast<double>(pos)) *
          (static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  return ap;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::size_t pos = 0, neg = 0;
  const auto groups = ranked_groups(scores, labels, pos, neg, "ROC AUC");
  // Twice the Mann-Whitney count, so ties stay integral.
  std::uint64_t twice = 0, neg_below = neg;
  for (const auto& g : groups) {
    neg_below -= g.neg;
    twice += 2 * g.pos * neg_below + g.pos * g.neg;
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

Confusion confusion(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size()) throw UsageError("confusion: predictions and labels differ in length");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 2 || predicted[i] < 0 || predicted[i] > 2) throw UsageError("confusion: class out of range");
    ++c.matrix[labels[i]][predicted[i]];
  }
  double recall_sum = 0;
  int classes = 0;
  for (int t = 0; t < 3; ++t) {
    const std::size_t support = c.matrix[t][0] + c.matrix[t][1] + c.matrix[t][2];
    if (support == 0) continue;
    recall_sum += static_cast<double>(c.matrix[t][t]) / static_cast<double>(support);
    ++classes;
  }
  if (classes == 0) throw UndefinedMetricError("balanced accuracy is undefined for an empty set");
  c.balanced_accuracy = recall_sum / classes;
  return c;
}

std::vector<Triple> ensemble_mean(const std::vector<std::vector<Triple>>& per_model) {
  if (per_model.empty()) throw UsageError("ensemble: need at least one model");
  std::vector<Triple> out(per_model[0].size(), Triple{0, 0, 0});
  for (const auto& m : per_model) {
    if (m.size() != out.size()) throw UsageError("ensemble: models predicted different numbers of knees");
    for (std::size_t i = 0; i < m.size(); ++i)
      for (int c = 0; c < 3; ++c) out[i][c] += m[i][c];
  }
  const double n = static_cast<double>(per_model.size());
  for (auto& t : out)
    for (auto& x : t) x /= n;
  return out;
}

Spread bootstrap_spread(const BinaryMetric& metric, const std::vector<double>& scores, const std::vector<int>& labels,
                        std::size_t n_boot, std::uint64_t seed) {
  if (n_boot < 100) throw ConfigError("bootstrap: n_boot must be at least 100");
  if (scores.size() != labels.size() || scores.empty()) throw UsageError("bootstrap: need matching, non-empty inputs");
  const std::size_t n = scores.size();
  Spread out;
  std::vector<double> values;
  values.reserve(n_boot);
  std::vector<double> s(n);
  std::vector<int> l(n);
  // Each replicate has its own stream, so replicate b is the same whatever
  // order replicates are computed in.
  for (std::size_t b = 0; b < n_boot; ++b) {
    Rng rng(Rng::mix(seed ^ Rng::mix(b + 1)));
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt == 1000) throw UndefinedMetricError("bootstrap: resamples keep containing a single class");
      bool any_pos = false, any_neg = false;
      for (std::size_t i = 0; i < n; ++i) {
        const auto j = rng.below(n);
        s[i] = scores[j];
        l[i] = labels[j];
        (l[i] ? any_pos : any_neg) = true;
      }
      if (any_pos && any_neg) break;
      ++out.redrawn;
    }
    values.push_back(metric(s, l));
  }
  out.draws = values.size();
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0;
  for (double v : values) var += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(var / static_cast<double>(values.size() - 1));
  return out;
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::size_t pos = 0, neg = 0;
  const auto groups = ranked_groups(scores, labels, pos, neg, "ROC curve");
  std::vector<RocPoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (const auto& g : groups) {
    tp += g.pos;
    fp += g.neg;
    out.push_back({g.score, static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos)});
  }
  return out;
}

std::vector<PrPoint> pr_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::size_t pos = 0, neg = 0;
  const auto groups = ranked_groups(scores, labels, pos, neg, "PR curve");
  std::vector<PrPoint> out;
  std::size_t tp = 0, fp = 0;
  for (const auto& g : groups) {
    tp += g.pos;
    fp += g.neg;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (out.empty()) out.push_back({std::numeric_limits<double>::infinity(), 0.0, precision});
    out.push_back({g.score, static_cast<double>(tp) / static_cast<double>(pos), precision});
  }
  return out;
}

double trapezoid_area(const std::vector<RocPoint>& curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2;
  return area;
}

}  // namespace volformer::eval
