#include <cmath>

#include "doctest.h"
#include "test_support.hpp"

using namespace deed;
using deed::testing::finite_difference;
using deed::testing::gradient_rel_err;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool grad = true, float lo = -1.0F, float hi = 1.0F) {
  std::vector<float> data(shape_numel(shape));
  for (auto& x : data) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(data), grad);
}

void check_close(const Tensor& t, std::initializer_list<float> expected, double tol = 1e-5) {
  REQUIRE(t.numel() == expected.size());
  std::size_t i = 0;
  for (float e : expected) CHECK(t.data()[i++] == doctest::Approx(e).epsilon(tol));
}

// Runs backward on `build()` and compares every input's gradient with
// central differences of the same function.
void check_gradients(const std::vector<Tensor>& inputs, const std::function<Tensor()>& build, double h = 1e-3,
                     double tol = 1e-3) {
  for (auto t : inputs) t.zero_grad();
  backward(build());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& t = inputs[k];
    INFO("input " << k);
    const auto numeric = finite_difference(t, [&] {
      NoGradGuard g;
      return static_cast<double>(build().item());
    }, h);
    CHECK(gradient_rel_err(t.grad(), numeric) <= tol);
  }
}

}  // namespace

TEST_CASE("matmul examples") {
  const auto a = Tensor::matrix({{1, 2}, {3, 4}});
  check_close(matmul(Tensor::matrix({{1, 0}, {0, 1}}), a), {1, 2, 3, 4});
  check_close(matmul(a, Tensor::matrix({{5, 6}, {7, 8}})), {19, 22, 43, 50});
  check_close(matmul(Tensor::matrix({{0, 0}}), Tensor::matrix({{1}, {1}})), {0});
  CHECK_THROWS_AS(matmul(a, Tensor::matrix({{1, 2, 3}})), ShapeError);
}

TEST_CASE("softmax examples") {
  check_close(softmax(Tensor::vector({0, 0})), {0.5F, 0.5F});
  check_close(softmax(Tensor::vector({1, 0})), {0.73106F, 0.26894F}, 1e-4);
  const auto big = softmax(Tensor::vector({1000, 0}));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(big.data()[0]));
  CHECK_THROWS_AS(softmax(Tensor::vector({NAN, 0})), NumericError);
}

TEST_CASE("softmax sums to one and ignores constant shifts") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = rng.range(1, 40);
    // Multiples of 2^-10 so that adding an integer shift is exact in float.
    auto v = random_tensor(rng, {n}, false, -20.0F, 20.0F);
    for (auto& x : v.mutable_data()) x = std::round(x * 1024.0F) / 1024.0F;
    const auto shift = static_cast<float>(static_cast<int>(rng.range(0, 100)) - 50);
    std::vector<float> shifted(v.data().begin(), v.data().end());
    for (auto& x : shifted) x += shift;
    const auto p = softmax(v);
    const auto q = softmax(Tensor({n}, shifted));
    double total = 0.0;
    for (float x : p.data()) total += x;
    CHECK(std::abs(total - 1.0) <= 1e-6);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(p.data()[i] - q.data()[i]) <= 1e-6);
  }
}

TEST_CASE("rms_norm examples") {
  check_close(rms_norm(Tensor::vector({1, 1}), Tensor::vector({1, 1})), {1, 1});
  check_close(rms_norm(Tensor::vector({3, 4}), Tensor::vector({1, 1})), {0.84853F, 1.13137F}, 1e-4);
  check_close(rms_norm(Tensor::vector({0, 0}), Tensor::vector({5, 5})), {0, 0});
}

TEST_CASE("cross_entropy examples") {
  CHECK(cross_entropy(Tensor::vector({0, 0, 0, 0}), 2).item() == doctest::Approx(1.38629).epsilon(1e-5));
  CHECK(cross_entropy(Tensor::vector({0, 20, 0, 0}), 1).item() == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(cross_entropy(Tensor::vector({0, 20, 0, 0}), 1).item() < 1e-7);
  CHECK(cross_entropy(Tensor::vector({1, 0}), 1).item() == doctest::Approx(1.31326).epsilon(1e-5));
  CHECK_THROWS_AS(cross_entropy(Tensor::vector({1, 0}), 2), IndexError);
  CHECK_THROWS_AS(cross_entropy(Tensor::vector({1, 0}), -1), IndexError);
}

TEST_CASE("backward examples") {
  auto x = Tensor::vector({1, 2, 3}, true);
  backward(sum(x));
  REQUIRE(x.has_grad());
  for (float g : x.grad()) CHECK(g == 1.0F);

  auto s = Tensor::scalar(3, true);
  backward(mul(s, s));
  CHECK(s.grad()[0] == doctest::Approx(6.0));

  CHECK_THROWS_AS(backward(sum(Tensor::vector({1, 2}))), GraphError);
  CHECK_THROWS_AS(backward(Tensor::vector({1, 2}, true)), GraphError);
}

TEST_CASE("backward visits each node once on a diamond graph") {
  auto x = Tensor::vector({0.5F, -1.0F}, true);
  const auto a = scale(x, 2.0F);
  const auto b = add(a, a);
  const auto c = mul(b, a);
  auto g = ComputeGraph::trace(sum(c));
  CHECK(g.size() == 4);  // scale, add, mul, sum
  CHECK(g.backward() == 4);
  // d/dx sum((2a)*a) with a = 2x -> 16x
  CHECK(x.grad()[0] == doctest::Approx(8.0));
  CHECK(x.grad()[1] == doctest::Approx(-16.0));
}

TEST_CASE("random two-layer network gradients match finite differences") {
  Rng rng(11);
  auto x = random_tensor(rng, {3, 4});
  auto w1 = random_tensor(rng, {4, 5});
  auto w2 = random_tensor(rng, {5, 3});
  const std::vector<int> targets{0, 2, 1};
  check_gradients({x, w1, w2}, [&] { return cross_entropy_rows(matmul(relu(matmul(x, w1)), w2), targets, -1); });
}

TEST_CASE("gradient fidelity over random compositions of the primitives") {
  constexpr double h = 1e-2;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    CAPTURE(seed);
    Rng rng(100 + seed);
    auto a = random_tensor(rng, {2, 4});
    auto b = random_tensor(rng, {4, 4});
    auto s = random_tensor(rng, {4}, true, 0.5F, 1.5F);
    auto c = random_tensor(rng, {2, 4});
    check_gradients({a, b, c}, [&] { return sum(mul(softmax(matmul(a, b)), c)); }, h);
    check_gradients({a, b, s}, [&] {
      const std::vector<int> t{1, 3};
      return cross_entropy_rows(rms_norm(matmul(a, b), s), t, -1);
    }, h);

    auto q = random_tensor(rng, {3, 4});
    auto k = random_tensor(rng, {5, 4});
    auto v = random_tensor(rng, {5, 4});
    auto r = random_tensor(rng, {3, 4});
    check_gradients({q, k, v}, [&] { return sum(mul(attention(q, k, v, 2, 2), r)); }, h);
    check_gradients({q, k, v}, [&] { return sum(mul(attention(q, k, v, 1, -1), r)); }, h);

    auto table = random_tensor(rng, {6, 3});
    auto extra = random_tensor(rng, {2, 3});
    const std::vector<int> ids{4, 1, 4};
    check_gradients({table, extra}, [&] {
      const auto e = concat_rows(embedding(table, ids), extra);
      return mean(scale(sub(slice_rows(e, 1, 4), slice_rows(e, 0, 3)), 3.0F));
    }, h);
  }
}

TEST_CASE("no_grad disables recording") {
  auto x = Tensor::vector({1, 2}, true);
  NoGradGuard g;
  const auto y = scale(x, 2.0F);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("identical inputs give bit-identical outputs") {
  auto run = [] {
    Rng rng(5);
    auto a = random_tensor(rng, {7, 9});
    auto b = random_tensor(rng, {9, 7});
    const auto out = softmax(attention(matmul(a, b), matmul(a, b), matmul(a, b), 7, 0));
    return std::vector<float>(out.data().begin(), out.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(add(Tensor::vector({1}), Tensor::vector({1, 2})), ShapeError);
  CHECK_THROWS_AS(rms_norm(Tensor::vector({1, 2}), Tensor::vector({1})), ShapeError);
  CHECK_THROWS_AS(attention(Tensor::matrix({{1, 2}}), Tensor::matrix({{1, 2}}), Tensor::matrix({{1, 2}}), 1, 1),
                  ShapeError);
}
