#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "volformer/profile/profile.hpp"

using namespace volformer;
using namespace volformer::profile;

namespace {

models::ModelConfig load(const std::string& name) {
  return models::ModelConfig::load(std::string(VF_SOURCE_DIR) + "/configs/" + name + ".cfg");
}

}  // namespace

TEST_CASE("layer conventions") {
  nn::Init<float> init(0, true);
  nn::Tracer tracer;
  nn::Conv<float> conv(init, 1, 4, {3, 3}, {1}, {1});
  CHECK(conv.trace(tracer, "conv", {1, 1, 8, 8}) == Shape{1, 4, 8, 8});
  CHECK(tracer.rows().back().macs == 2304);
  CHECK(tracer.rows().back().params == 36);

  nn::Linear<float> fc(init, 10, 7);
  fc.trace(tracer, "fc", {5, 10});
  CHECK(tracer.rows().back().macs == 5 * 10 * 7);
  CHECK(tracer.rows().back().params == 77);

  nn::BatchNorm<float> bn(init, 4);
  bn.trace(tracer, "bn", {1, 4, 8, 8});
  CHECK(tracer.rows().back().macs == 0);
}

TEST_CASE("input specs") {
  auto cfg = load("toy_2d_trf");
  CHECK(input_spec_of(cfg) == "sag=8x32x32");
  CHECK(input_spec_of(apply_input_spec(cfg, "16x24x24")) == "sag=16x24x24");
  auto mv = apply_input_spec(load("toy_multiview_shared"), "sag=8x32x32, cor=12x32x24");
  CHECK(mv.geometry_for(View::cor) == models::SliceGeometry{12, 32, 24});
  CHECK_THROWS_AS(apply_input_spec(cfg, "64x160"), ConfigError);
  CHECK_THROWS_AS(apply_input_spec(cfg, "top=8x32x32"), ConfigError);
  CHECK_THROWS_AS(apply_input_spec(cfg, "0x32x32"), ConfigError);
}

TEST_CASE("reports are pure functions of the graph") {
  auto cfg = load("toy_2d_trf");
  const auto a = count_costs(cfg);
  cfg.seed = 99;
  const auto b = count_costs(cfg);
  CHECK(report_json(a) == report_json(b));
  std::uint64_t macs = 0, params = 0;
  for (const auto& r : a.rows) macs += r.macs, params += r.params;
  CHECK(a.total_macs == macs);
  CHECK(a.total_params == params);
  auto j = nlohmann::json::parse(report_json(a));
  CHECK(j["totals"]["macs"].get<std::uint64_t>() == macs);
  CHECK(j["layers"].size() == a.rows.size());
  CHECK(j["totals"]["macs_without_attention_scores"].get<std::uint64_t>() == macs - a.attention_score_macs);
}

TEST_CASE("doubling the slice count") {
  for (const char* name : {"toy_2d_trf", "full_2d_trf"}) {
    CAPTURE(name);
    const auto base = load(name);
    const std::size_t k = base.geometry.count;
    const auto r1 = count_costs(base);
    auto doubled = base;
    doubled.geometry.count = 2 * k;
    const auto r2 = count_costs(doubled);
    CHECK(r2.encoder_macs == 2 * r1.encoder_macs);
    // L = k + 1 tokens with the class token, so scores grow by (2k+1)^2/(k+1)^2.
    CHECK(r2.attention_score_macs * (k + 1) * (k + 1) == r1.attention_score_macs * (2 * k + 1) * (2 * k + 1));
    CHECK(static_cast<double>(r2.attention_score_macs) / static_cast<double>(r1.attention_score_macs) > 3.5);
  }
}

TEST_CASE("parameter count matches the checkpoint tensors") {
  for (const char* name : {"toy_2d_trf", "toy_2d_fc", "toy_2d_bilstm", "toy_multiview_individual"}) {
    CAPTURE(name);
    const auto cfg = load(name);
    auto model = models::build_model<float>(cfg);
    const auto path = (std::filesystem::temp_directory_path() / "vf_profile.vfwt").string();
    save_checkpoint(path, model->state_dict());
    std::set<std::string> buffers;
    for (const auto& [n, t] : model->named_buffers()) buffers.insert(n);
    std::uint64_t total = 0;
    for (const auto& e : load_checkpoint(path))
      if (!buffers.count(e.name)) total += e.values.size();
    std::filesystem::remove(path);
    CHECK(count_costs(cfg).total_params == total);
  }
}

TEST_CASE("full-scale efficiency counts") {
  const auto start = std::chrono::steady_clock::now();
  struct Row {
    const char* config;
    double macs, params;
  };
  for (const Row& row : {Row{"full_2d_fc", 134e9, 91e6}, Row{"full_2d_bilstm", 135e9, 29e6},
                         Row{"full_2d_trf", 141e9, 133e6}, Row{"full_multiview_shared", 443e9, 133e6},
                         Row{"full_multiview_individual", 443e9, 180e6}}) {
    CAPTURE(row.config);
    const auto r = count_costs(load(row.config));
    CHECK(std::abs(static_cast<double>(r.total_macs) / row.macs - 1) <= 0.10);
    CHECK(std::abs(static_cast<double>(r.total_params) / row.params - 1) <= 0.10);
  }
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() < 10.0);
}

TEST_CASE("inference timing") {
  const auto cfg = load("toy_2d_trf");
  const auto t8 = time_inference(cfg, 5, 30);
  REQUIRE(t8.runnable);
  CHECK(t8.samples_ms.size() == 30);
  CHECK(t8.median_ms < 1000.0);
  CHECK(t8.iqr_ms / t8.median_ms < 0.3);
  CHECK(!t8.hardware.empty());
  auto k16 = cfg;
  k16.geometry.count = 16;
  CHECK(time_inference(k16, 5, 30).median_ms > t8.median_ms);

  auto j = nlohmann::json::parse(report_json(count_costs(cfg), &t8));
  CHECK(j["timing"]["median_ms"].get<double>() == t8.median_ms);
  CHECK(j["timing"]["runnable"].get<bool>());
}
