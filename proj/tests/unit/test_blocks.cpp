#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "grad_suite.hpp"
#include "volformer/error.hpp"
#include "volformer/nn/blocks.hpp"

using namespace volformer;
using namespace volformer::nn;
using vftest::TensorD;

namespace {

void zero(TensorD t) {
  for (auto& v : t.mutable_data()) v = 0;
}

void copy_into(TensorD dst, const TensorD& src) {
  std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

}  // namespace

TEST_CASE("attention with a single token is a linear map of it") {
  Init<double> init(1);
  MultiHeadAttention<double> mha(init, 8, 2);
  Rng rng(2);
  auto x = vftest::random_tensor({1, 8}, rng);
  auto y = mha.forward(x);
  auto expect = mha.output->forward(mha.value->forward(x));
  for (std::size_t i = 0; i < 8; ++i) CHECK(y.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-14));
}

TEST_CASE("attention is permutation equivariant and row-stochastic") {
  Init<double> init(3);
  MultiHeadAttention<double> mha(init, 8, 4);
  Rng rng(4);
  auto x = vftest::random_tensor({5, 8}, rng);
  const std::vector<std::size_t> perm{0, 3, 1, 4, 2};
  std::vector<TensorD> rows;
  for (auto p : perm) rows.push_back(narrow(x, 0, p, 1));
  auto xp = concat(rows, 0);
  auto y = mha.forward(x);
  auto yp = mha.forward(xp);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(yp.at({i, j}) == doctest::Approx(y.at({perm[i], j})).epsilon(1e-12));

  for (const auto& w : mha.attention_weights(x)) {
    REQUIRE(w.shape() == Shape{5, 5});
    for (std::size_t i = 0; i < 5; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < 5; ++j) total += w.at({i, j});
      CHECK(std::abs(total - 1) < 1e-9);
    }
  }
}

TEST_CASE("attention rejects indivisible head count") {
  Init<double> init(1);
  CHECK_THROWS_AS(MultiHeadAttention<double>(init, 10, 3), ConfigError);
  CHECK_THROWS_AS(TransformerBlock<double>(init, AttentionConfig{8, 3, 1.0, 0.0}), ConfigError);
}

TEST_CASE("transformer block with zeroed residual outputs is the identity") {
  Init<double> init(5);
  TransformerBlock<double> block(init, {8, 2, 1.0, 0.1});
  zero(block.attention->output->weight);
  zero(block.attention->output->bias);
  zero(block.fc2->weight);
  zero(block.fc2->bias);
  Rng rng(6), drop(7);
  for (std::size_t k : {1, 3, 9}) {
    auto x = vftest::random_tensor({k, 8}, rng);
    auto y = block.forward(x, drop);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  }
}

TEST_CASE("bottleneck with zero conv weights passes the input through") {
  Init<double> init(8);
  Bottleneck<double> block(init, 2, 8, 2, 4, 1);
  CHECK(!block.proj);
  for (auto& [name, p] : block.named_parameters())
    if (name.find("conv") != std::string::npos) zero(p);
  Rng rng(9);
  auto x = vftest::random_tensor({2, 8, 5, 5}, rng, 0.0, 1.0);
  auto y = block.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("strided bottleneck halves even extents and rounds odd extents up") {
  Init<double> init(1);
  Bottleneck<double> block(init, 2, 4, 2, 2, 2);
  Rng rng(2);
  CHECK(block.forward(vftest::random_tensor({1, 4, 8, 8}, rng)).shape() == Shape{1, 4, 4, 4});
  CHECK(block.forward(vftest::random_tensor({1, 4, 7, 9}, rng)).shape() == Shape{1, 4, 4, 5});
  Tracer tracer;
  CHECK(block.trace(tracer, "b", {1, 4, 7, 9}) == Shape{1, 4, 4, 5});
  CHECK_THROWS_AS(Bottleneck<double>(init, 2, 4, 2, 2, 3), ConfigError);
  CHECK_THROWS_AS(Bottleneck<double>(init, 2, 4, 0, 2, 1), ConfigError);
}

TEST_CASE("bidirectional LSTM symmetry") {
  Init<double> init(10);
  BiLstm<double> lstm(init, 4, 5);
  auto& f = *lstm.forward_layers[0];
  auto& b = *lstm.backward_layers[0];
  copy_into(b.weight_ih, f.weight_ih);
  copy_into(b.weight_hh, f.weight_hh);
  for (auto& v : f.bias_ih.mutable_data()) v = 0.1;
  copy_into(b.bias_ih, f.bias_ih);
  copy_into(b.bias_hh, f.bias_hh);

  Rng rng(11);
  auto single = lstm.forward(vftest::random_tensor({1, 4}, rng));
  REQUIRE(single.shape() == Shape{10});
  for (std::size_t i = 0; i < 5; ++i) CHECK(single.data()[i] == single.data()[5 + i]);

  auto x = vftest::random_tensor({6, 4}, rng);
  std::vector<TensorD> rows;
  for (std::size_t t = 6; t-- > 0;) rows.push_back(narrow(x, 0, t, 1));
  auto y = lstm.forward(x);
  auto yr = lstm.forward(concat(rows, 0));
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(yr.data()[i] == y.data()[5 + i]);
    CHECK(yr.data()[5 + i] == y.data()[i]);
  }
}

TEST_CASE("bidirectional LSTM rejects an empty sequence") {
  Init<double> init(1);
  BiLstm<double> lstm(init, 4, 5);
  CHECK_THROWS_AS(lstm.forward(TensorD::meta({0, 4})), UsageError);
}

TEST_CASE("(2+1)D intermediate width matches the full 3x3x3 parameter count") {
  CHECK(Conv2Plus1d<double>::matched_width(4, 4) == 9);
  CHECK(Conv2Plus1d<double>::matched_width(64, 64) == 144);
  Init<double> init(1);
  Conv2Plus1d<double> c(init, 4, 4);
  const std::size_t spatial = c.spatial->weight.numel(), temporal = c.temporal->weight.numel();
  CHECK(spatial + temporal == 27 * 4 * 4);

  Rng rng(3);
  auto x = vftest::random_tensor({1, 4, 5, 6, 7}, rng);
  auto full = conv(x, TensorD::zeros({4, 4, 3, 3, 3}), TensorD{}, {{1}, {1}});
  CHECK(c.forward(x).shape() == full.shape());
  CHECK_THROWS_AS(c.forward(vftest::random_tensor({4, 5, 6, 7}, rng)), ShapeError);
}

TEST_CASE("ResNet-50 reconstruction has the reference parameter count") {
  Init<float> init(0, true);
  ResNetEncoder<float> net(init, EncoderSpec::resnet50(), 2);
  CHECK(net.parameter_count() == 25'557'032);
  Tracer tracer;
  CHECK(net.trace(tracer, "", {1, 3, 224, 224}) == Shape{1, 1000});
  CHECK(tracer.total_params() == 25'557'032);
  // Widely quoted multiply-accumulate count for a 224x224 image.
  CHECK(tracer.total_macs() == doctest::Approx(4.09e9).epsilon(0.01));
}

TEST_CASE("encoder parameter names follow the torchvision layout") {
  Init<float> init(0, true);
  ResNetEncoder<float> net(init, EncoderSpec::resnet50(), 2);
  auto params = net.named_parameters();
  auto has = [&](const std::string& n) {
    return std::any_of(params.begin(), params.end(), [&](auto& p) { return p.first == n; });
  };
  CHECK(has("conv1.weight"));
  CHECK(has("layer1.0.downsample.conv.weight"));
  CHECK(has("layer4.2.conv3.weight"));
  CHECK(has("fc.weight"));
}

TEST_CASE("block finite-difference suite") {
  for (const auto& c : vftest::block_grad_cases()) {
    auto r = c.run(1);
    INFO(c.name);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_err < 1e-4);
  }
}
