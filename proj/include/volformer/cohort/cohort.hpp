#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "volformer/rng.hpp"

namespace volformer::cohort {

// Progression target classes.
enum Progression : int { none = 0, slow = 1, fast = 2 };
inline constexpr int kNumClasses = 3;
const char* class_name(int cls);

// Radiograph visit months and the two label horizons.
struct VisitGrid {
  std::vector<int> months{0, 12, 24, 36, 48, 72, 96};
  int fast_horizon = 72;
  int slow_horizon = 96;
};

struct KneeRecord {
  std::string subject_id;
  char side = 'R';  // 'L' or 'R'
  std::string institution_id;
  double age = 0;
  char sex = 'F';  // 'F' or 'M'
  std::optional<double> bmi;
  bool tka_baseline = false;
  std::map<int, int> klg_by_month;  // month 0 is the baseline grade
  bool has_mri = true;              // not part of the CSV; set from the volume directory

  std::optional<int> baseline_klg() const;
  std::string knee_id() const { return subject_id + "_" + side; }
};

struct ProgressionLabel {
  int cls = none;
  std::optional<int> event_month;
  std::string rule_trace;
};

// Either a label, or censored (no event seen and no final-horizon visit).
struct LabelResult {
  bool determinate = true;
  ProgressionLabel label;
};

// Throws UsageError when the baseline grade is missing or already 4.
LabelResult derive_label(const KneeRecord& r, const VisitGrid& grid = {});

// Exclusion reasons in the order they are checked.
inline constexpr const char* kExclusionReasons[] = {"missing_klg", "klg4_baseline", "tka_baseline",
                                                    "missing_bmi", "missing_mri", "indeterminate_label"};

struct LabeledKnee {
  std::size_t index;  // into the input records
  ProgressionLabel label;
};

struct Exclusions {
  std::vector<LabeledKnee> kept;
  std::vector<std::pair<std::size_t, std::string>> excluded;  // index, reason
};

Exclusions apply_exclusions(const std::vector<KneeRecord>& records, const VisitGrid& grid = {});

struct Splits {
  std::vector<std::size_t> eval;                // indices of hold-out institution knees
  std::vector<std::vector<std::size_t>> folds;  // validation knees of each fold
  // Training indices of fold f: every non-eval index outside folds[f].
  std::vector<std::size_t> train_of(std::size_t fold) const;
};

// `labels[i]` is the class of records[i]. Subjects stay whole; folds are
// filled greedily so each class is spread as evenly as the subjects allow.
Splits split_dataset(const std::vector<KneeRecord>& records, const std::vector<int>& labels,
                     const std::string& holdout_institution, std::size_t n_folds, std::uint64_t seed);

// Oversamples every class to the majority count by cycling through fresh
// permutations of each class, then shuffles the epoch. `labels` is indexed by
// the values in `indices`.
std::vector<std::size_t> resample_balance(const std::vector<std::size_t>& indices, const std::vector<int>& labels,
                                          Rng& rng);

// Cohort CSV with one row per knee. Columns are fixed by the visit grid:
// subject_id,side,institution_id,age,sex,bmi,tka_baseline,klg_m0,...
std::string csv_header(const VisitGrid& grid = {});
std::vector<KneeRecord> parse_cohort_csv(const std::string& text, const std::string& source, const VisitGrid& grid = {});
std::vector<KneeRecord> load_cohort_csv(const std::string& path, const VisitGrid& grid = {});
std::string format_cohort_csv(const std::vector<KneeRecord>& records, const VisitGrid& grid = {});

}  // namespace volformer::cohort
