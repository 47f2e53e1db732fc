#include <algorithm>
#include <atomic>
#include <cmath>

#include "doctest.h"
#include "synth_samples.hpp"
#include "volformer/ops.hpp"

using namespace volformer;
using namespace volformer::train;

namespace {

models::ModelConfig toy(const std::string& name) {
  return models::ModelConfig::load(std::string(VF_SOURCE_DIR) + "/configs/" + name + ".cfg");
}

TrainConfig short_run(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.warmup_epochs = 1;
  t.lr_main = 1e-3;
  return t;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  CHECK(lr_schedule(cfg, 0) == 1e-5);
  CHECK(lr_schedule(cfg, 2) == doctest::Approx(4.6e-5).epsilon(1e-12));
  for (std::size_t e = 5; e < 100; ++e) CHECK(lr_schedule(cfg, e) == 1e-4);
  for (std::size_t e = 1; e < 100; ++e) CHECK(lr_schedule(cfg, e) >= lr_schedule(cfg, e - 1));
  CHECK_THROWS_AS(lr_schedule(cfg, 100), UsageError);
}

TEST_CASE("Adam") {
  SUBCASE("first step of a constant unit gradient moves by lr") {
    auto p = Tensor<double>::scalar(0.5, true);
    AdamState state;
    p.mutable_grad()[0] = 1.0;
    adam_step<double>({{"p", p}}, state, 1e-3, 0.0);
    CHECK(p.item() - 0.5 == doctest::Approx(-1e-3).epsilon(1e-7));
  }
  SUBCASE("zero gradient and no decay leave parameters unchanged") {
    auto p = Tensor<double>::from_data({3}, {1, -2, 3}, true);
    AdamState state;
    for (int i = 0; i < 5; ++i) {
      p.zero_grad();
      adam_step<double>({{"p", p}}, state, 1e-2, 0.0);
    }
    CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{1, -2, 3});
  }
  SUBCASE("decay alone scales by 1 - lr * wd per step") {
    auto p = Tensor<double>::from_data({2}, {1, -4}, true);
    AdamState state;
    for (int i = 0; i < 10; ++i) adam_step<double>({{"p", p}}, state, 1e-2, 0.5);
    CHECK(p.data()[0] == doctest::Approx(std::pow(1 - 5e-3, 10)).epsilon(1e-12));
    CHECK(p.data()[1] == doctest::Approx(-4 * std::pow(1 - 5e-3, 10)).epsilon(1e-12));
  }
  SUBCASE("matches a closed-form two-step trajectory") {
    auto p = Tensor<double>::scalar(1.0, true);
    AdamState state;
    p.mutable_grad()[0] = 2.0;
    adam_step<double>({{"p", p}}, state, 0.1, 0.0);
    p.mutable_grad()[0] = -1.0;
    adam_step<double>({{"p", p}}, state, 0.1, 0.0);
    const double m = 0.9 * 0.1 * 2 + 0.1 * -1, v = 0.999 * 0.001 * 4 + 0.001 * 1;
    const double expected = 1.0 - 0.1 * 2 / (2 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    CHECK(p.item() == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("clipping rescales by the global norm") {
    auto a = Tensor<double>::scalar(0, true), b = Tensor<double>::scalar(0, true);
    AdamState clipped, plain;
    a.mutable_grad()[0] = 3;
    b.mutable_grad()[0] = 4;
    adam_step<double>({{"a", a}, {"b", b}}, clipped, 1.0, 0.0, 1.0);
    CHECK(clipped.m[0][0] == doctest::Approx(0.1 * 0.6));
    CHECK(clipped.m[1][0] == doctest::Approx(0.1 * 0.8));
  }
  SUBCASE("non-finite gradient names the tensor") {
    auto good = Tensor<float>::scalar(1, true), bad = Tensor<float>::scalar(1, true);
    good.mutable_grad()[0] = 1;
    bad.mutable_grad()[0] = std::nanf("");
    AdamState state;
    try {
      adam_step<float>({{"encoder.stem.weight", good}, {"aggregator.head.bias", bad}}, state, 1e-3, 0.0);
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("aggregator.head.bias") != std::string::npos);
    }
    CHECK(good.item() == 1.0f);
  }
}

TEST_CASE("train config text") {
  TrainConfig t;
  t.epochs = 12;
  t.warmup_epochs = 2;
  t.lr_main = 3e-4;
  t.grad_clip = 5;
  t.augment = false;
  t.policy.max_rotation_deg = 7.5;
  const auto again = TrainConfig::parse(t.dump(), "t.cfg");
  CHECK(again.dump() == t.dump());
  CHECK(TrainConfig::parse("", "t.cfg").dump() == TrainConfig{}.dump());

  auto error_of = [](const std::string& text) {
    try {
      TrainConfig::parse(text, "t.cfg");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(error_of("epochs = 10\nbogus = 1\n") == "t.cfg:2: unknown key 'bogus'");
  CHECK(error_of("epochs = ten\n") == "t.cfg:1: invalid value 'ten' for epochs");
  CHECK(error_of("epochs = 4\nepochs = 5\n") == "t.cfg:2: duplicate key 'epochs'");
  CHECK(error_of("epochs = 5\n").find("warmup_epochs") != std::string::npos);
  CHECK(error_of("lr_main = 0\n").find("learning rates") != std::string::npos);
  CHECK(error_of("snapshot_metric = roc_auc\n").find("snapshot_metric") != std::string::npos);
  CHECK(error_of("augment.gamma_min = 2\n") != "");
}

TEST_CASE("batches") {
  auto cfg = toy("toy_2d_trf");
  Sample s{"K", 1, {}};
  data::SliceStack st{View::sag, 8, 32, 32, std::vector<float>(8 * 32 * 32, 0.0f), "x"};
  st.data[0] = 255;
  st.data[1] = 127.5f;
  s.stacks[View::sag] = st;
  Rng rng(0);
  auto b = make_batch<double>(cfg, {&s, &s}, nullptr, rng);
  const auto& x = b.at(View::sag);
  CHECK(x.shape() == Shape{2, 8, 1, 32, 32});
  CHECK(x.data()[0] == 1.0);
  CHECK(x.data()[1] == 0.0);
  CHECK(x.data()[2] == -1.0);

  cfg.encoder.in_channels = 3;
  auto rgb = make_batch<double>(cfg, {&s}, nullptr, rng).at(View::sag);
  CHECK(rgb.shape() == Shape{1, 8, 3, 32, 32});
  CHECK(rgb.at({0, 0, 2, 0, 0}) == 1.0);
  CHECK(rgb.at({0, 0, 1, 0, 1}) == 0.0);

  s.stacks[View::sag].k = 4;
  s.stacks[View::sag].data.resize(4 * 32 * 32);
  CHECK_THROWS_AS(make_batch<double>(cfg, {&s}, nullptr, rng), ShapeError);
}

TEST_CASE("samples follow the configured views") {
  auto knees = vftest::pick_per_class(1, 3);
  auto cfg = toy("toy_multiview_shared");
  auto samples = vftest::synth_samples(knees, cfg);
  REQUIRE(samples.size() == 3);
  for (const auto& s : samples) {
    CHECK(s.stacks.size() == cfg.views.size());
    for (View v : cfg.views) {
      const auto& g = cfg.geometry_for(v);
      CHECK(s.stacks.at(v).k == g.count);
      CHECK(s.stacks.at(v).height == g.height);
      CHECK(s.stacks.at(v).width == g.width);
    }
  }
  Rng rng(1);
  std::vector<const Sample*> ptrs;
  for (auto& s : samples) ptrs.push_back(&s);
  auto model = models::build_model<float>(cfg);
  CHECK(model->forward(make_batch<float>(cfg, ptrs, nullptr, rng), rng).shape() == Shape{3, 3});
}

TEST_CASE("fold training contract") {
  const auto cfg = toy("toy_2d_trf");
  const auto train = vftest::synth_samples(vftest::pick_per_class(4, 5), cfg);
  const auto val = vftest::synth_samples(vftest::pick_per_class(2, 6), cfg);
  const auto tcfg = short_run(4);

  const auto a = train_fold<float>(cfg, train, val, tcfg, 0);
  const auto b = train_fold<float>(cfg, train, val, tcfg, 0);
  REQUIRE(a.history.size() == 4);
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].train_loss == b.history[e].train_loss);
    CHECK(a.history[e].val_ap == b.history[e].val_ap);
    CHECK(a.history[e].lr == lr_schedule(tcfg, e));
  }
  CHECK(history_csv(a.history) == history_csv(b.history));
  CHECK(history_csv(a.history).rfind("epoch,lr,train_loss,val_ap,val_auc\n0,", 0) == 0);

  // The snapshot is the first epoch with the highest validation AP.
  std::size_t argmax = 0;
  for (std::size_t e = 1; e < a.history.size(); ++e)
    if (a.history[e].val_ap > a.history[argmax].val_ap) argmax = e;
  CHECK(a.best.epoch == argmax);
  CHECK(a.best.val_ap == a.history[argmax].val_ap);

  // A different fold index draws different streams.
  const auto c = train_fold<float>(cfg, train, val, tcfg, 1);
  CHECK(c.history[0].train_loss != a.history[0].train_loss);

  // The stored snapshot reproduces its validation AP.
  auto ens = ensemble_predict<float>(cfg, {a.best}, val);
  CHECK(eval::average_precision(ens.pooled(), ens.binary_labels()) == doctest::Approx(a.best.val_ap).epsilon(1e-6));
  CHECK(ens.knee_ids.front() == val.front().knee_id);
}

TEST_CASE("single-class validation keeps the final epoch") {
  const auto cfg = toy("toy_2d_fc");
  const auto train = vftest::synth_samples(vftest::pick_per_class(2, 8), cfg);
  std::vector<Sample> val;
  for (const auto& s : train)
    if (s.label == 0) val.push_back(s);
  const auto r = train_fold<float>(cfg, train, val, short_run(3), 0);
  for (const auto& h : r.history) CHECK(std::isnan(h.val_ap));
  CHECK(r.best.epoch == 2);
  CHECK(history_csv(r.history).find(",nan,nan\n") != std::string::npos);
}

TEST_CASE("divergence keeps the completed history") {
  const auto cfg = toy("toy_2d_fc");
  auto train = vftest::synth_samples(vftest::pick_per_class(2, 9), cfg);
  auto tcfg = short_run(4);
  tcfg.augment = false;
  try {
    train_fold<float>(cfg, train, {}, tcfg, 0, [&](const EpochRecord& rec) {
      if (rec.epoch == 1)
        for (auto& s : train) std::fill(s.stacks[View::sag].data.begin(), s.stacks[View::sag].data.end(), std::nanf(""));
    });
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    CHECK(e.history.size() == 2);
    CHECK(std::string(e.what()).find("epoch 2") != std::string::npos);
  }
}

TEST_CASE("parallel_for") {
  std::vector<int> hits(50, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  std::atomic<int> ran{0};
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [&](std::size_t i) {
                                 ++ran;
                                 if (i == 4) throw DataError("boom");
                               }),
                  DataError);
  CHECK(ran.load() >= 5);
}
