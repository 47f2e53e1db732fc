#include <algorithm>
#include <array>
#include <functional>
#include <map>
#include <set>

#include "doctest.h"
#include "label_oracle.hpp"
#include "volformer/cohort/cohort.hpp"
#include "volformer/data/synth.hpp"
#include "volformer/error.hpp"

using namespace volformer;
using namespace volformer::cohort;

namespace {

KneeRecord knee(std::map<int, int> klg) {
  KneeRecord r;
  r.subject_id = "S1";
  r.institution_id = "A";
  r.age = 60;
  r.bmi = 27.5;
  r.klg_by_month = std::move(klg);
  return r;
}

}  // namespace

TEST_CASE("worked label examples") {
  auto none_case = derive_label(knee({{0, 0}, {48, 1}, {96, 1}}));
  CHECK(none_case.determinate);
  CHECK(none_case.label.cls == none);
  CHECK(!none_case.label.event_month);

  auto fast_case = derive_label(knee({{0, 1}, {24, 2}}));
  CHECK(fast_case.label.cls == fast);
  CHECK(fast_case.label.event_month == 24);

  VisitGrid grid;
  grid.months = {0, 12, 24, 36, 48, 72, 84, 96};
  auto slow_case = derive_label(knee({{0, 2}, {84, 3}}), grid);
  CHECK(slow_case.label.cls == slow);
  CHECK(slow_case.label.event_month == 84);

  auto via_kl1 = derive_label(knee({{0, 0}, {24, 1}, {84, 2}}), grid);
  CHECK(via_kl1.label.cls == slow);
  CHECK(via_kl1.label.event_month == 84);
  CHECK(via_kl1.label.rule_trace.find("KL0->KL2") != std::string::npos);
}

TEST_CASE("label edge cases") {
  CHECK(derive_label(knee({{0, 1}, {12, 1}})).determinate == false);
  CHECK(derive_label(knee({{0, 1}, {72, 2}})).label.cls == fast);
  CHECK(derive_label(knee({{0, 1}, {96, 2}})).label.cls == slow);
  // A decrease neither counts nor resets the reference grade.
  auto dip = derive_label(knee({{0, 2}, {12, 1}, {24, 2}, {96, 2}}));
  CHECK(dip.label.cls == none);
  auto dip_then_rise = derive_label(knee({{0, 2}, {12, 1}, {36, 3}}));
  CHECK(dip_then_rise.label.cls == fast);
  CHECK(dip_then_rise.label.event_month == 36);
  CHECK_THROWS_AS(derive_label(knee({{12, 1}})), UsageError);
  CHECK_THROWS_AS(derive_label(knee({{0, 4}, {96, 4}})), UsageError);
}

TEST_CASE("labels agree with the threshold oracle on every monotone trajectory") {
  const std::vector<int> months{0, 12, 24, 36, 48, 72, 96};
  std::size_t checked = 0;
  std::vector<int> grades(7, 0);
  // Enumerate nondecreasing grade sequences with baseline below 4.
  std::function<void(std::size_t, int)> walk = [&](std::size_t pos, int lo) {
    if (pos == grades.size()) {
      if (grades[0] == 4) return;
      for (unsigned mask = 0; mask < 64; ++mask) {
        std::map<int, int> klg{{0, grades[0]}};
        std::vector<std::pair<int, int>> observed{{0, grades[0]}};
        for (std::size_t v = 1; v < 7; ++v) {
          if (mask & (1u << (v - 1))) {
            klg[months[v]] = grades[v];
            observed.emplace_back(months[v], grades[v]);
          }
        }
        auto got = derive_label(knee(klg));
        const int expect = vftest::label_oracle(grades[0], observed);
        CAPTURE(mask);
        if (expect < 0) {
          CHECK_FALSE(got.determinate);
        } else {
          REQUIRE(got.determinate);
          CHECK(got.label.cls == expect);
        }
        ++checked;
      }
      return;
    }
    for (int g = lo; g <= 4; ++g) {
      grades[pos] = g;
      walk(pos + 1, g);
    }
  };
  walk(0, 0);
  CHECK(checked == 329 * 64);
}

TEST_CASE("exclusion reasons") {
  std::vector<KneeRecord> rs;
  rs.push_back(knee({{0, 4}, {96, 4}}));
  auto no_bmi = knee({{0, 1}, {96, 1}});
  no_bmi.bmi.reset();
  rs.push_back(no_bmi);
  rs.push_back(knee({{0, 2}, {96, 2}}));
  auto tka = knee({{0, 2}, {96, 2}});
  tka.tka_baseline = true;
  rs.push_back(tka);
  auto no_mri = knee({{0, 2}, {96, 2}});
  no_mri.has_mri = false;
  rs.push_back(no_mri);
  rs.push_back(knee({{12, 2}, {96, 2}}));
  rs.push_back(knee({{0, 2}, {48, 2}}));

  auto ex = apply_exclusions(rs);
  REQUIRE(ex.kept.size() == 1);
  CHECK(ex.kept[0].index == 2);
  CHECK(ex.kept[0].label.cls == none);
  std::map<std::size_t, std::string> reasons(ex.excluded.begin(), ex.excluded.end());
  CHECK(reasons[0] == "klg4_baseline");
  CHECK(reasons[1] == "missing_bmi");
  CHECK(reasons[3] == "tka_baseline");
  CHECK(reasons[4] == "missing_mri");
  CHECK(reasons[5] == "missing_klg");
  CHECK(reasons[6] == "indeterminate_label");
}

TEST_CASE("cohort CSV round-trips and rejects bad rows with line numbers") {
  auto knees = data::synth_generate(20, 3);
  std::vector<KneeRecord> rs;
  for (auto& k : knees) rs.push_back(k.record);
  for (auto& r : rs) r.has_mri = true;
  const auto text = format_cohort_csv(rs);
  auto back = parse_cohort_csv(text, "c.csv");
  REQUIRE(back.size() == rs.size());
  for (std::size_t i = 0; i < rs.size(); ++i) {
    CHECK(back[i].knee_id() == rs[i].knee_id());
    CHECK(back[i].klg_by_month == rs[i].klg_by_month);
    CHECK(back[i].bmi == rs[i].bmi);
    CHECK(back[i].age == rs[i].age);
    CHECK(back[i].tka_baseline == rs[i].tka_baseline);
  }
  CHECK(format_cohort_csv(back) == text);

  auto expect_error = [](const std::string& body, const std::string& fragment) {
    try {
      parse_cohort_csv(csv_header() + "\n" + body, "c.csv");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  expect_error("S1,X,A,60,F,25,0,1,,,,,,1\n", "c.csv:2: side");
  expect_error("S1,R,A,60,F,25,0,1,,,,,,1\nS2,R,A,60,Q,25,0,1,,,,,,1\n", "c.csv:3: sex");
  expect_error("S1,R,A,60,F,25,0,5,,,,,,1\n", "c.csv:2: bad klg_m0");
  expect_error("S1,R,A,60,F,25,0,1,,,,,\n", "c.csv:2: expected 14 columns");
  expect_error("S1,R,A,60,F,25,maybe,1,,,,,,1\n", "tka_baseline");
  expect_error("S1,R,A,60,F,25,0,1,,,,,,1\nS1,R,A,60,F,25,0,1,,,,,,1\n", "duplicate knee S1_R");
  CHECK_THROWS_AS(parse_cohort_csv("subject_id,side\n", "c.csv"), ParseError);
}

TEST_CASE("subject-wise stratified splits") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    auto knees = data::synth_generate(2702, 1000 + seed);
    std::vector<KneeRecord> all;
    for (auto& k : knees) all.push_back(k.record);
    auto ex = apply_exclusions(all);
    std::vector<KneeRecord> rs;
    std::vector<int> labels;
    for (auto& k : ex.kept) {
      rs.push_back(all[k.index]);
      labels.push_back(k.label.cls);
    }
    auto splits = split_dataset(rs, labels, "E", 5, seed);
    auto again = split_dataset(rs, labels, "E", 5, seed);
    CHECK(again.folds == splits.folds);

    std::map<std::string, int> owner;  // subject -> fold, eval = -1
    for (auto i : splits.eval) {
      CHECK(rs[i].institution_id == "E");
      owner[rs[i].subject_id] = -1;
    }
    std::size_t assigned = splits.eval.size();
    std::array<double, 3> global{};
    std::size_t train_n = 0;
    for (std::size_t f = 0; f < 5; ++f) {
      for (auto i : splits.folds[f]) {
        auto [it, fresh] = owner.emplace(rs[i].subject_id, static_cast<int>(f));
        CHECK((fresh || it->second == static_cast<int>(f)));
        global[labels[i]] += 1;
        ++train_n;
      }
      assigned += splits.folds[f].size();
    }
    CHECK(assigned == rs.size());
    for (auto& g : global) g /= static_cast<double>(train_n);
    for (std::size_t f = 0; f < 5; ++f) {
      std::array<double, 3> share{};
      for (auto i : splits.folds[f]) share[labels[i]] += 1;
      for (int c = 0; c < 3; ++c) CHECK(std::abs(share[c] / splits.folds[f].size() - global[c]) <= 0.03);
    }
  }
}

TEST_CASE("split preconditions") {
  std::vector<KneeRecord> rs{knee({{0, 1}, {96, 1}})};
  CHECK_THROWS_AS(split_dataset(rs, {0}, "Z", 5, 1), ConfigError);
  CHECK_THROWS_AS(split_dataset(rs, {0}, "A", 1, 1), ConfigError);
}

TEST_CASE("balanced resampling") {
  std::vector<int> labels;
  std::vector<std::size_t> idx;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < std::array<int, 3>{730, 77, 193}[c]; ++i) {
      idx.push_back(labels.size());
      labels.push_back(c);
    }
  Rng rng(5);
  auto epoch = resample_balance(idx, labels, rng);
  CHECK(epoch.size() == 3 * 730);
  std::array<std::size_t, 3> counts{};
  std::map<std::size_t, std::size_t> seen;
  for (auto i : epoch) {
    ++counts[labels[i]];
    ++seen[i];
  }
  CHECK(counts == std::array<std::size_t, 3>{730, 730, 730});
  CHECK(seen.size() == idx.size());  // every sample of every class appears
  for (auto& [i, n] : seen) {
    if (labels[i] == 1) CHECK((n == 9 || n == 10));
    if (labels[i] == 0) CHECK(n == 1);
  }

  Rng a(9), b(9);
  CHECK(resample_balance(idx, labels, a) == resample_balance(idx, labels, b));

  std::vector<std::size_t> balanced_idx{0, 1, 2, 3, 4, 5};
  std::vector<int> balanced{0, 1, 2, 0, 1, 2};
  auto perm = resample_balance(balanced_idx, balanced, rng);
  std::sort(perm.begin(), perm.end());
  CHECK(perm == balanced_idx);

  CHECK_THROWS_AS(resample_balance({0, 1}, std::vector<int>{0, 1}, rng), ConfigError);
}
