#include <cmath>

#include "doctest.h"
#include "grad_suite.hpp"
#include "volformer/checkpoint.hpp"
#include "volformer/error.hpp"
#include "volformer/ops.hpp"

using namespace volformer;
using vftest::TensorD;

namespace {

TensorD make(Shape s, std::vector<double> v) { return TensorD::from_data(std::move(s), std::move(v)); }

void check_close(std::span<const double> got, const std::vector<double>& want, double tol = 1e-12) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("matmul hand example and identity") {
  auto c = matmul(make({2, 2}, {1, 2, 3, 4}), make({2, 2}, {5, 6, 7, 8}));
  check_close(c.data(), {19, 22, 43, 50});

  Rng rng(3);
  auto a = vftest::random_tensor({3, 4}, rng);
  auto eye = TensorD::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 5] = 1;
  auto ai = matmul(a, eye);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(ai.data()[i] == a.data()[i]);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(TensorD::zeros({2, 3}), TensorD::zeros({2, 3}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("convolution of ones and 1x1 conv as matmul") {
  auto y = conv(TensorD::full({1, 1, 3, 3}, 1.0), TensorD::full({1, 1, 3, 3}, 1.0), TensorD{}, {{1}, {0}});
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 9.0);

  // 1x1 kernel: y[:, p] = W x[:, p] for every pixel p.
  Rng rng(5);
  auto x = vftest::random_tensor({1, 3, 4, 4}, rng);
  auto w = vftest::random_tensor({2, 3, 1, 1}, rng);
  auto out = conv(x, w, TensorD{}, {{1}, {0}});
  auto as_mat = matmul(reshape(w, {2, 3}), reshape(x, {3, 16}));
  for (std::size_t i = 0; i < 32; ++i) CHECK(out.data()[i] == doctest::Approx(as_mat.data()[i]).epsilon(1e-14));
}

TEST_CASE("convolution rejects non-positive output extent") {
  CHECK_THROWS_AS(conv(TensorD::zeros({1, 1, 2, 2}), TensorD::zeros({1, 1, 3, 3}), TensorD{}, {{1}, {0}}), ConfigError);
}

TEST_CASE("softmax symmetry, stability and normalization") {
  check_close(softmax(make({2}, {0, 0}), 0).data(), {0.5, 0.5});
  auto s = softmax(make({2}, {1000, 0}), 0);
  CHECK(std::abs(s.data()[0] - 1.0) < 1e-12);
  CHECK(std::abs(s.data()[1]) < 1e-12);

  Rng rng(11);
  auto x = vftest::random_tensor({4, 5, 3}, rng, -50, 50);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto p = softmax(x, axis);
    const auto& sh = x.shape();
    for (std::size_t i = 0; i < sh[0]; ++i)
      for (std::size_t j = 0; j < sh[1]; ++j)
        for (std::size_t k = 0; k < sh[2]; ++k) {
          if ((axis == 0 && i) || (axis == 1 && j) || (axis == 2 && k)) continue;
          double total = 0;
          for (std::size_t t = 0; t < sh[axis]; ++t) {
            std::size_t idx[3] = {i, j, k};
            idx[axis] = t;
            total += p.at({idx[0], idx[1], idx[2]});
          }
          CHECK(std::abs(total - 1.0) < 1e-9);
        }
  }
}

TEST_CASE("layer norm constant input and normalization identity") {
  auto g = TensorD::full({4}, 1.0);
  auto b = TensorD::zeros({4});
  auto y = layer_norm(TensorD::full({1, 4}, 3.0), 1, g, b);
  for (double v : y.data()) CHECK(v == 0.0);

  Rng rng(2);
  auto x = vftest::random_tensor({1, 400}, rng, -5, 5);
  auto gamma = TensorD::full({400}, -2.0);
  auto beta = TensorD::full({400}, 0.5);
  auto z = layer_norm(x, 1, gamma, beta);
  double m = 0, v = 0;
  for (double t : z.data()) m += t;
  m /= 400;
  for (double t : z.data()) v += (t - m) * (t - m);
  CHECK(m == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(std::sqrt(v / 400) == doctest::Approx(2.0).epsilon(1e-4));
}

TEST_CASE("pooling examples") {
  auto x = make({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(global_avg_pool(x).item() == 2.5);
  CHECK(pool(x, PoolKind::max, {2, 2}, {2, 2}).item() == 4.0);

  auto a = make({1, 1, 2, 2}, {1, 2, 3, 4});
  a.set_requires_grad(true);
  pool(a, PoolKind::avg, {2, 2}, {2, 2}).backward();
  for (double g : a.grad()) CHECK(g == 0.25);

  CHECK_THROWS_AS(pool(x, PoolKind::max, {3, 3}, {1, 1}), ConfigError);
}

TEST_CASE("backward basics") {
  auto x = make({3}, {1, 2, 3});
  x.set_requires_grad(true);
  volformer::sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  // x used twice: d/dx sum(x*y + x*y) = 2y
  auto a = make({2}, {1, 2});
  auto y = make({2}, {3, 5});
  a.set_requires_grad(true);
  auto xy = mul(a, y);
  volformer::sum(add(xy, xy)).backward();
  check_close(a.grad(), {6, 10});

  // Repeated calls accumulate.
  auto p = make({2}, {1, 1});
  p.set_requires_grad(true);
  auto loss = volformer::sum(scale(p, 2.0));
  loss.backward();
  loss.backward();
  check_close(p.grad(), {4, 4});

  CHECK_THROWS_AS(scale(p, 2.0).backward(), UsageError);
}

TEST_CASE("shared subexpression gradient equals the unrolled tree") {
  Rng rng(9);
  auto x = vftest::random_tensor({4}, rng);
  auto y = vftest::random_tensor({4}, rng);
  x.set_requires_grad(true);
  auto s = tanh(mul(x, y));
  volformer::sum(mul(s, s)).backward();
  std::vector<double> shared(x.grad().begin(), x.grad().end());
  x.zero_grad();
  volformer::sum(mul(tanh(mul(x, y)), tanh(mul(x, y)))).backward();
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(shared[i]).epsilon(1e-15));
}

TEST_CASE("focal loss values") {
  std::uint64_t clamped = 0;
  auto p = make({1, 3}, {0.05, 0.9, 0.05});
  CHECK(focal_loss(p, {1}, 2.0).item() == doctest::Approx(0.01 * -std::log(0.9)).epsilon(1e-12));
  CHECK(focal_loss(make({1, 3}, {0, 1, 0}), {1}, 2.0).item() == 0.0);
  auto z = focal_loss(make({1, 3}, {1, 0, 0}), {2}, 2.0, &clamped).item();
  CHECK(clamped == 1);
  CHECK(z == doctest::Approx(-std::log(1e-12)));

  Rng rng(4);
  auto probs = softmax(vftest::random_tensor({6, 3}, rng, -3, 3), 1);
  std::vector<int> y{0, 1, 2, 2, 1, 0};
  double ce = 0;
  for (std::size_t i = 0; i < 6; ++i) ce -= std::log(probs.at({i, static_cast<std::size_t>(y[i])}));
  CHECK(std::abs(focal_loss(probs, y, 0.0).item() - ce / 6) < 1e-12);
}

TEST_CASE("ops are deterministic") {
  Rng r1(1), r2(1);
  auto a = vftest::random_tensor({1, 2, 6, 6}, r1);
  auto b = vftest::random_tensor({1, 2, 6, 6}, r2);
  Rng d1(7), d2(7);
  auto w = TensorD::full({3, 2, 3, 3}, 0.1);
  auto y1 = dropout(conv(a, w, TensorD{}, {{1}, {1}}), 0.3, d1);
  auto y2 = dropout(conv(b, w, TensorD{}, {{1}, {1}}), 0.3, d2);
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("checkpoint round trip and corrupt input") {
  std::vector<CheckpointEntry> entries{{"a.weight", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"b", {1}, {-0.5f}}};
  auto bytes = encode_checkpoint(entries);
  auto back = decode_checkpoint(bytes, "mem");
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a.weight");
  CHECK(back[0].shape == Shape{2, 3});
  CHECK(back[1].values == std::vector<float>{-0.5f});
  CHECK(bytes[0] == 'V');
  bytes.resize(bytes.size() - 2);
  CHECK_THROWS_AS(decode_checkpoint(bytes, "mem"), ParseError);
}

TEST_CASE("primitive finite-difference suite") {
  for (const auto& c : vftest::primitive_grad_cases()) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      auto r = c.run(seed);
      INFO(c.name << " seed " << seed);
      CHECK(r.checked > 0);
      CHECK(r.max_rel_err < 1e-4);
    }
  }
}
