#include "volformer/eval/report.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "volformer/cohort/cohort.hpp"
#include "volformer/text.hpp"

namespace volformer::eval {

namespace {

std::string num(double v) { return std::isinf(v) ? (v > 0 ? "inf" : "-inf") : text::format_double(v); }

void write_text(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << body;
  if (!out) throw DataError("short write to " + path.string());
}

nlohmann::ordered_json spread_json(double value, const Spread& s) {
  nlohmann::ordered_json j;
  j["value"] = value;
  j["bootstrap_mean"] = s.mean;
  j["spread"] = s.std;
  j["redrawn_resamples"] = s.redrawn;
  return j;
}

}  // namespace

EvalReport evaluate_predictions(const PredictionSet& preds, std::size_t n_boot, std::uint64_t seed) {
  preds.validate();
  EvalReport r;
  r.knees = preds.size();
  const auto scores = preds.pooled();
  const auto binary = preds.binary_labels();
  for (int b : binary) r.positives += static_cast<std::size_t>(b);
  r.prevalence = r.knees ? static_cast<double>(r.positives) / static_cast<double>(r.knees) : 0;
  r.n_boot = n_boot;
  r.seed = seed;
  r.ap = average_precision(scores, binary);
  r.roc_auc = roc_auc(scores, binary);
  r.ap_spread = bootstrap_spread(average_precision, scores, binary, n_boot, seed);
  r.roc_auc_spread = bootstrap_spread(roc_auc, scores, binary, n_boot, seed);
  r.confusion = confusion(preds.predicted(), preds.labels);
  r.roc = roc_curve(scores, binary);
  r.pr = pr_curve(scores, binary);
  return r;
}

std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["knees"] = r.knees;
  j["positives"] = r.positives;
  j["prevalence"] = r.prevalence;
  j["score"] = "p_slow + p_fast";
  j["average_precision"] = spread_json(r.ap, r.ap_spread);
  j["roc_auc"] = spread_json(r.roc_auc, r.roc_auc_spread);
  j["balanced_accuracy"] = r.confusion.balanced_accuracy;
  auto& cm = j["confusion_matrix"];
  cm["rows"] = "true class";
  cm["columns"] = "predicted class";
  cm["classes"] = {"none", "slow", "fast"};
  for (const auto& row : r.confusion.matrix) cm["counts"].push_back(row);
  auto& meta = j["metadata"];
  meta["spread_method"] = kSpreadMethod;
  meta["n_boot"] = r.n_boot;
  meta["bootstrap_seed"] = r.seed;
  meta["curves"] = {"roc.csv", "pr.csv", "confusion.csv"};
  return j.dump(2) + "\n";
}

void write_curves(const EvalReport& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::string roc = "threshold,fpr,tpr\n";
  for (const auto& p : r.roc) roc += num(p.threshold) + "," + num(p.fpr) + "," + num(p.tpr) + "\n";
  write_text(std::filesystem::path(dir) / "roc.csv", roc);
  std::string pr = "threshold,recall,precision\n";
  for (const auto& p : r.pr) pr += num(p.threshold) + "," + num(p.recall) + "," + num(p.precision) + "\n";
  write_text(std::filesystem::path(dir) / "pr.csv", pr);
  std::string cm = "true\\predicted,none,slow,fast\n";
  for (int t = 0; t < 3; ++t) {
    cm += cohort::class_name(t);
    for (auto n : r.confusion.matrix[t]) cm += "," + std::to_string(n);
    cm += "\n";
  }
  write_text(std::filesystem::path(dir) / "confusion.csv", cm);
}

std::string predictions_csv(const PredictionSet& preds) {
  preds.validate();
  std::string out = "knee_id,label,p_none,p_slow,p_fast\n";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out += (preds.knee_ids.empty() ? std::to_string(i) : preds.knee_ids[i]) + "," + std::to_string(preds.labels[i]);
    for (double p : preds.probs[i]) out += "," + num(p);
    out += "\n";
  }
  return out;
}

PredictionSet parse_predictions_csv(const std::string& content, const std::string& source) {
  std::istringstream in(content);
  std::string line;
  std::size_t line_no = 0;
  PredictionSet out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (text::trim(line) != "knee_id,label,p_none,p_slow,p_fast") throw ParseError(source + ":1: unexpected header");
      continue;
    }
    if (text::trim(line).empty()) continue;
    auto cells = text::split(line, ',');
    std::uint64_t label = 0;
    Triple p{};
    bool ok = cells.size() == 5 && text::parse_u64(text::trim(cells[1]), label) && label <= 2;
    for (int c = 0; ok && c < 3; ++c) ok = text::parse_double(text::trim(cells[2 + c]), p[c]);
    if (!ok) throw ParseError(source + ":" + std::to_string(line_no) + ": malformed prediction row");
    out.knee_ids.emplace_back(text::trim(cells[0]));
    out.labels.push_back(static_cast<int>(label));
    out.probs.push_back(p);
  }
  try {
    out.validate();
  } catch (const UsageError& e) {
    throw ParseError(source + ": " + e.what());
  }
  return out;
}

}  // namespace volformer::eval
