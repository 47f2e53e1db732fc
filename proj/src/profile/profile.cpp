#include "volformer/profile/profile.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <new>
#include <thread>

#include "json.hpp"
#include "volformer/error.hpp"
#include "volformer/text.hpp"

namespace volformer::profile {

namespace {

models::SliceGeometry parse_geometry(std::string_view s, const std::string& spec) {
  std::vector<std::size_t> dims;
  if (!text::parse_dims(s, dims) || dims.size() != 3) {
    throw ConfigError("input spec '" + spec + "': expected slices x height x width, e.g. 64x160x160");
  }
  return {dims[0], dims[1], dims[2]};
}

double quantile(std::vector<double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::vector<std::string> reconciliation_notes(const models::ModelConfig& cfg) {
  using models::Family;
  std::vector<std::string> notes{"batch-norm, layer-norm, activations and pooling count 0 MACs",
                                 "attention rows count 4*L*d^2 projection MACs plus 2*L^2*d score and value "
                                 "MACs; the latter are also summed in attention_score_macs"};
  const auto& e = cfg.encoder;
  notes.push_back("encoder: in_channels " + std::to_string(e.in_channels) + ", stem " + std::to_string(e.stem_width) +
                  ", widths " + text::format_dims(e.widths) + ", blocks " + text::format_dims(e.blocks) +
                  ", expansion " + std::to_string(e.expansion));
  switch (cfg.family) {
    case Family::trf_2d:
    case Family::trf_multiview_shared:
    case Family::trf_multiview_individual:
      notes.push_back("transformer: dim " + std::to_string(cfg.attention.dim) + ", blocks " +
                      std::to_string(cfg.trf_blocks) + ", heads " + std::to_string(cfg.attention.heads) +
                      ", mlp_ratio " + text::format_double(cfg.attention.mlp_ratio));
      break;
    case Family::fc_2d:
      notes.push_back("fc: hidden " + std::to_string(cfg.fc_hidden));
      break;
    case Family::bilstm_2d:
      notes.push_back("bilstm: hidden " + std::to_string(cfg.lstm_hidden) + " per direction, layers " +
                      std::to_string(cfg.lstm_layers));
      break;
    default:
      break;
  }
  return notes;
}

}  // namespace

models::ModelConfig apply_input_spec(models::ModelConfig cfg, const std::string& spec) {
  for (const auto& raw : text::split(spec, ',')) {
    const auto entry = text::trim(raw);
    if (const auto eq = entry.find('='); eq != std::string_view::npos) {
      const View v = parse_view(text::trim(entry.substr(0, eq)));
      cfg.view_geometry[v] = parse_geometry(text::trim(entry.substr(eq + 1)), spec);
    } else {
      cfg.geometry = parse_geometry(entry, spec);
    }
  }
  cfg.validate();
  return cfg;
}

std::string input_spec_of(const models::ModelConfig& cfg) {
  std::string out;
  for (View v : cfg.views) {
    const auto& g = cfg.geometry_for(v);
    out += (out.empty() ? "" : ",") + std::string(view_name(v)) + "=" + text::format_dims({g.count, g.height, g.width});
  }
  return out;
}

CostReport count_costs(const models::ModelConfig& cfg) {
  const auto model = models::build_model<float>(cfg, true);
  CostReport r;
  r.family = models::family_name(cfg.family);
  r.input = input_spec_of(cfg);
  r.rows = model->layers();
  for (const auto& row : r.rows) {
    r.total_macs += row.macs;
    r.total_params += row.params;
    r.attention_score_macs += row.attention_score_macs;
    if (row.name.rfind("encoder", 0) == 0) r.encoder_macs += row.macs;
  }
  r.notes = reconciliation_notes(cfg);
  return r;
}

std::string hardware_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      cpu = std::string(text::trim(line.substr(line.find(':') + 1)));
      break;
    }
  }
  return cpu + ", " + std::to_string(std::thread::hardware_concurrency()) + " logical cores, compiler " + __VERSION__;
}

TimingReport time_inference(const models::ModelConfig& cfg, std::size_t warmup, std::size_t runs) {
  if (runs == 0) throw ConfigError("time_inference: runs must be positive");
  TimingReport r;
  r.warmup = warmup;
  r.runs = runs;
  r.hardware = hardware_descriptor();
  try {
    auto model = models::build_model<float>(cfg);
    model->eval();
    NoGradGuard guard;
    Rng rng(0);
    models::Batch<float> batch;
    for (View v : cfg.views) {
      const auto& g = cfg.geometry_for(v);
      std::vector<float> values(g.count * cfg.encoder.in_channels * g.height * g.width);
      for (auto& x : values) x = static_cast<float>(rng.uniform(-1, 1));
      batch.emplace(v, Tensor<float>::from_data({1, g.count, cfg.encoder.in_channels, g.height, g.width}, std::move(values)));
    }
    for (std::size_t i = 0; i < warmup + runs; ++i) {
      const auto start = std::chrono::steady_clock::now();
      model->forward(batch, rng);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      if (i >= warmup) r.samples_ms.push_back(ms);
    }
  } catch (const std::bad_alloc&) {
    r.runnable = false;
    r.reason = "not runnable at this scale: out of memory";
    r.samples_ms.clear();
    return r;
  }
  auto sorted = r.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  r.median_ms = quantile(sorted, 0.5);
  r.iqr_ms = quantile(sorted, 0.75) - quantile(sorted, 0.25);
  return r;
}

std::string report_json(const CostReport& c, const TimingReport* timing) {
  nlohmann::ordered_json j;
  j["family"] = c.family;
  j["input"] = c.input;
  auto& totals = j["totals"];
  totals["macs"] = c.total_macs;
  totals["params"] = c.total_params;
  totals["encoder_macs"] = c.encoder_macs;
  totals["attention_score_macs"] = c.attention_score_macs;
  totals["macs_without_attention_scores"] = c.total_macs - c.attention_score_macs;
  j["notes"] = c.notes;
  auto& rows = j["layers"];
  rows = nlohmann::ordered_json::array();
  for (const auto& r : c.rows) {
    nlohmann::ordered_json row;
    row["name"] = r.name;
    row["kind"] = r.kind;
    row["input"] = text::format_dims(r.input);
    row["output"] = text::format_dims(r.output);
    row["macs"] = r.macs;
    row["params"] = r.params;
    if (r.attention_score_macs) row["attention_score_macs"] = r.attention_score_macs;
    rows.push_back(std::move(row));
  }
  if (timing) {
    auto& t = j["timing"];
    t["runnable"] = timing->runnable;
    if (!timing->runnable) t["reason"] = timing->reason;
    t["warmup"] = timing->warmup;
    t["runs"] = timing->runs;
    t["median_ms"] = timing->median_ms;
    t["iqr_ms"] = timing->iqr_ms;
    t["hardware"] = timing->hardware;
  }
  return j.dump(2) + "\n";
}

}  // namespace volformer::profile
