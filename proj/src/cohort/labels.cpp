#include <algorithm>
#include <array>
#include <map>
#include <numeric>
#include <set>

#include "volformer/cohort/cohort.hpp"
#include "volformer/error.hpp"

namespace volformer::cohort {

const char* class_name(int cls) {
  switch (cls) {
    case none:
      return "none";
    case slow:
      return "slow";
    case fast:
      return "fast";
  }
  return "?";
}

std::optional<int> KneeRecord::baseline_klg() const {
  auto it = klg_by_month.find(0);
  if (it == klg_by_month.end()) return std::nullopt;
  return it->second;
}

LabelResult derive_label(const KneeRecord& r, const VisitGrid& grid) {
  const auto base = r.baseline_klg();
  if (!base) throw UsageError("derive_label: knee " + r.knee_id() + " has no baseline KLG");
  if (*base >= 4) throw UsageError("derive_label: knee " + r.knee_id() + " has baseline KLG 4");
  const int b = *base;

  // Visits are walked in month order; KL0 -> KL1 is not progression and a
  // decrease neither counts nor moves the reference grade.
  for (const auto& [month, klg] : r.klg_by_month) {
    if (month <= 0 || month > grid.slow_horizon) continue;
    if (klg <= b) continue;
    if (b == 0 && klg == 1) continue;
    ProgressionLabel label;
    label.event_month = month;
    const std::string step = "KL" + std::to_string(b) + "->KL" + std::to_string(klg) + " at month " + std::to_string(month);
    if (month <= grid.fast_horizon) {
      label.cls = fast;
      label.rule_trace = "event " + step + " <= " + std::to_string(grid.fast_horizon);
    } else {
      label.cls = slow;
      label.rule_trace = "event " + step + " in (" + std::to_string(grid.fast_horizon) + ", " +
                         std::to_string(grid.slow_horizon) + "]";
    }
    return {true, label};
  }
  LabelResult out;
  if (r.klg_by_month.count(grid.slow_horizon)) {
    out.label.cls = none;
    out.label.rule_trace = "no event through observed month " + std::to_string(grid.slow_horizon);
  } else {
    out.determinate = false;
    out.label.rule_trace = "no event and month " + std::to_string(grid.slow_horizon) + " not observed";
  }
  return out;
}

Exclusions apply_exclusions(const std::vector<KneeRecord>& records, const VisitGrid& grid) {
  Exclusions out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto base = r.baseline_klg();
    const char* reason = nullptr;
    if (!base) reason = "missing_klg";
    else if (*base == 4) reason = "klg4_baseline";
    else if (r.tka_baseline) reason = "tka_baseline";
    else if (!r.bmi) reason = "missing_bmi";
    else if (!r.has_mri) reason = "missing_mri";
    if (reason) {
      out.excluded.emplace_back(i, reason);
      continue;
    }
    auto result = derive_label(r, grid);
    if (!result.determinate) {
      out.excluded.emplace_back(i, "indeterminate_label");
      continue;
    }
    out.kept.push_back({i, std::move(result.label)});
  }
  return out;
}

std::vector<std::size_t> Splits::train_of(std::size_t fold) const {
  if (fold >= folds.size()) throw UsageError("fold " + std::to_string(fold) + " out of range");
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < folds.size(); ++f)
    if (f != fold) out.insert(out.end(), folds[f].begin(), folds[f].end());
  std::sort(out.begin(), out.end());
  return out;
}

Splits split_dataset(const std::vector<KneeRecord>& records, const std::vector<int>& labels,
                     const std::string& holdout_institution, std::size_t n_folds, std::uint64_t seed) {
  if (labels.size() != records.size()) throw UsageError("split_dataset: one label per record required");
  if (n_folds < 2) throw ConfigError("split_dataset: n_folds must be at least 2");
  Splits out;
  out.folds.resize(n_folds);

  struct Subject {
    std::vector<std::size_t> knees;
    std::array<std::size_t, kNumClasses> counts{};
  };
  std::map<std::string, Subject> subjects;
  std::set<std::string> eval_subjects;
  bool holdout_seen = false;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= kNumClasses) throw UsageError("split_dataset: label out of range");
    if (records[i].institution_id == holdout_institution) {
      holdout_seen = true;
      out.eval.push_back(i);
      eval_subjects.insert(records[i].subject_id);
      continue;
    }
    auto& s = subjects[records[i].subject_id];
    s.knees.push_back(i);
    ++s.counts[static_cast<std::size_t>(labels[i])];
  }
  if (!holdout_seen) throw ConfigError("split_dataset: hold-out institution '" + holdout_institution + "' has no knees");
  for (const auto& [id, _] : subjects) {
    if (eval_subjects.count(id)) throw DataError("split_dataset: subject " + id + " appears in several institutions");
  }

  std::array<std::size_t, kNumClasses> totals{};
  std::vector<const Subject*> order;
  for (const auto& [_, s] : subjects) {
    for (int c = 0; c < kNumClasses; ++c) totals[c] += s.counts[c];
    order.push_back(&s);
  }
  Rng rng(Rng::mix(seed));
  rng.shuffle(order);

  // Subjects holding the rarest class are placed first, while every fold
  // still has room for it.
  std::array<int, kNumClasses> rarity{0, 1, 2};
  std::stable_sort(rarity.begin(), rarity.end(), [&](int a, int b) { return totals[a] < totals[b]; });
  auto rarest = [&](const Subject* s) {
    for (int r = 0; r < kNumClasses; ++r)
      if (s->counts[rarity[r]] > 0) return r;
    return kNumClasses;
  };
  std::stable_sort(order.begin(), order.end(), [&](const Subject* a, const Subject* b) { return rarest(a) < rarest(b); });

  const double folds_d = static_cast<double>(n_folds);
  std::vector<std::array<std::size_t, kNumClasses>> fill(n_folds);
  std::vector<std::size_t> size(n_folds, 0);
  std::size_t all = 0;
  for (auto t : totals) all += t;
  for (const Subject* s : order) {
    const int key = rarity[std::min(rarest(s), kNumClasses - 1)];
    const double target_key = std::max(1.0, static_cast<double>(totals[key]) / folds_d);
    const double target_all = std::max(1.0, static_cast<double>(all) / folds_d);
    std::size_t best = 0;
    double best_key = 0, best_all = 0;
    for (std::size_t f = 0; f < n_folds; ++f) {
      const double k = static_cast<double>(fill[f][key]) / target_key;
      const double a = static_cast<double>(size[f]) / target_all;
      if (f == 0 || k < best_key || (k == best_key && a < best_all)) {
        best = f;
        best_key = k;
        best_all = a;
      }
    }
    for (int c = 0; c < kNumClasses; ++c) fill[best][c] += s->counts[c];
    size[best] += s->knees.size();
    out.folds[best].insert(out.folds[best].end(), s->knees.begin(), s->knees.end());
  }
  for (auto& f : out.folds) std::sort(f.begin(), f.end());
  return out;
}

std::vector<std::size_t> resample_balance(const std::vector<std::size_t>& indices, const std::vector<int>& labels,
                                          Rng& rng) {
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i : indices) {
    if (i >= labels.size()) throw UsageError("resample_balance: index beyond label table");
    const int c = labels[i];
    if (c < 0 || c >= kNumClasses) throw UsageError("resample_balance: label out of range");
    by_class[static_cast<std::size_t>(c)].push_back(i);
  }
  std::size_t majority = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    if (by_class[c].empty()) throw ConfigError(std::string("resample_balance: class ") + class_name(c) + " has no samples");
    majority = std::max(majority, by_class[c].size());
  }
  std::vector<std::size_t> epoch;
  epoch.reserve(kNumClasses * majority);
  for (auto& members : by_class) {
    std::size_t added = 0;
    while (added < majority) {
      auto round = members;
      rng.shuffle(round);
      for (std::size_t i = 0; i < round.size() && added < majority; ++i, ++added) epoch.push_back(round[i]);
    }
  }
  rng.shuffle(epoch);
  return epoch;
}

}  // namespace volformer::cohort
