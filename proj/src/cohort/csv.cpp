#include <fstream>
#include <set>
#include <sstream>

#include "volformer/cohort/cohort.hpp"
#include "volformer/error.hpp"
#include "volformer/text.hpp"

namespace volformer::cohort {

namespace {

constexpr const char* kFixedColumns[] = {"subject_id", "side", "institution_id", "age", "sex", "bmi", "tka_baseline"};
constexpr std::size_t kNumFixed = std::size(kFixedColumns);

std::vector<std::string> header_columns(const VisitGrid& grid) {
  std::vector<std::string> cols(std::begin(kFixedColumns), std::end(kFixedColumns));
  for (int m : grid.months) cols.push_back("klg_m" + std::to_string(m));
  return cols;
}

}  // namespace

std::string csv_header(const VisitGrid& grid) {
  std::string out;
  for (const auto& c : header_columns(grid)) out += (out.empty() ? "" : ",") + c;
  return out;
}

std::vector<KneeRecord> parse_cohort_csv(const std::string& content, const std::string& source, const VisitGrid& grid) {
  std::istringstream in(content);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) -> void { throw ParseError(source + ":" + std::to_string(line_no) + ": " + msg); };

  const auto expected = header_columns(grid);
  bool header_seen = false;
  std::vector<KneeRecord> out;
  std::set<std::string> seen_knees;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) continue;
    auto cells = text::split(line, ',');
    for (auto& c : cells) c = std::string(text::trim(c));
    if (!header_seen) {
      if (cells != expected) fail("header must be '" + csv_header(grid) + "'");
      header_seen = true;
      continue;
    }
    if (cells.size() != expected.size()) {
      fail("expected " + std::to_string(expected.size()) + " columns, got " + std::to_string(cells.size()));
    }
    KneeRecord r;
    r.subject_id = cells[0];
    if (r.subject_id.empty()) fail("subject_id is empty");
    if (cells[1] != "L" && cells[1] != "R") fail("side must be L or R, got '" + cells[1] + "'");
    r.side = cells[1][0];
    r.institution_id = cells[2];
    if (r.institution_id.empty()) fail("institution_id is empty");
    if (!text::parse_double(cells[3], r.age) || r.age < 0) fail("bad age '" + cells[3] + "'");
    if (cells[4] != "F" && cells[4] != "M") fail("sex must be F or M, got '" + cells[4] + "'");
    r.sex = cells[4][0];
    if (!cells[5].empty()) {
      double bmi = 0;
      if (!text::parse_double(cells[5], bmi) || bmi <= 0) fail("bad bmi '" + cells[5] + "'");
      r.bmi = bmi;
    }
    if (!text::parse_bool(cells[6], r.tka_baseline)) fail("bad tka_baseline '" + cells[6] + "'");
    for (std::size_t v = 0; v < grid.months.size(); ++v) {
      const auto& cell = cells[kNumFixed + v];
      if (cell.empty()) continue;
      std::uint64_t klg = 0;
      if (!text::parse_u64(cell, klg) || klg > 4) fail("bad " + expected[kNumFixed + v] + " '" + cell + "'");
      r.klg_by_month[grid.months[v]] = static_cast<int>(klg);
    }
    if (!seen_knees.insert(r.knee_id()).second) fail("duplicate knee " + r.knee_id());
    out.push_back(std::move(r));
  }
  if (!header_seen) throw ParseError(source + ": empty cohort file");
  return out;
}

std::vector<KneeRecord> load_cohort_csv(const std::string& path, const VisitGrid& grid) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_cohort_csv(ss.str(), path, grid);
}

std::string format_cohort_csv(const std::vector<KneeRecord>& records, const VisitGrid& grid) {
  std::string out = csv_header(grid) + "\n";
  for (const auto& r : records) {
    out += r.subject_id + "," + r.side + "," + r.institution_id + "," + text::format_double(r.age) + "," + r.sex + ",";
    if (r.bmi) out += text::format_double(*r.bmi);
    out += r.tka_baseline ? ",1" : ",0";
    for (int m : grid.months) {
      out += ",";
      auto it = r.klg_by_month.find(m);
      if (it != r.klg_by_month.end()) out += std::to_string(it->second);
    }
    out += "\n";
  }
  return out;
}

}  // namespace volformer::cohort
