#pragma once

#include <utility>
#include <vector>

namespace vftest {

// Threshold form of the rules: the first grade that counts is baseline + 1,
// except from KL0 where it is KL2. On monotone trajectories the label is
// decided by which horizon window holds an observed visit at that grade.
// Returns 0 none, 1 slow, 2 fast, -1 indeterminate.
inline int label_oracle(int baseline, const std::vector<std::pair<int, int>>& observed) {
  const int threshold = baseline == 0 ? 2 : baseline + 1;
  bool fast_hit = false, slow_hit = false, final_seen = false;
  for (auto [m, g] : observed) {
    if (m > 0 && m <= 72 && g >= threshold) fast_hit = true;
    if (m > 72 && m <= 96 && g >= threshold) slow_hit = true;
    if (m == 96) final_seen = true;
  }
  if (fast_hit) return 2;
  if (slow_hit) return 1;
  return final_seen ? 0 : -1;
}

}  // namespace vftest
