// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fd_cases.hpp"
#include "helpers.hpp"
#include "qsat/network.hpp"
#include "qsat/ops.hpp"
#include "qsat/training.hpp"

using namespace qsat;
using qt::randn;

using qt::fd_cases;
using qt::probe;

TEST_CASE("every differentiable op matches central differences over 10 seeds") {
  for (const auto& c : fd_cases()) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Tensor x = c.point(seed);
      double err = finite_difference_check([&](const Tensor& p) { return c.fn(p, seed); }, x);
      INFO(c.name << " seed " << seed);
      CHECK(err <= 1e-5);
    }
  }
}

TEST_CASE("matmul examples") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  Tensor p = matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p[i] == m[i]);
  Tensor r = matmul(Tensor({1, 2}, {1, 0}), Tensor({2, 1}, {0, 1}));
  CHECK(r.shape() == Shape{1, 1});
  CHECK(r[0] == 0.0);
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
  double err = finite_difference_check([](const Tensor& a) { return probe(matmul(a, randn({4, 2}, 2)), 3); },
                                       randn({3, 4}, 1));
  CHECK(err <= 1e-6);
}

TEST_CASE("conv2d examples") {
  Tensor ones({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(ones, Tensor({1, 1, 1, 1}, {2.0}));
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (double v : y.data()) CHECK(v == 2.0);

  // impulse at the centre of a padded input: output is the kernel flipped
  Tensor impulse({1, 1, 3, 3}, 0.0);
  impulse[4] = 1.0;
  Tensor k({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor r = conv2d(impulse, k, 1, 1);
  for (std::size_t i = 0; i < 9; ++i) CHECK(r[i] == k[8 - i]);

  CHECK_THROWS_AS(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3})), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor({1, 1, 4, 4}), Tensor({1, 1, 3, 3}), 2, 0), ShapeError);
}

TEST_CASE("mean_square examples") {
  CHECK(mean_square(Tensor({4}, {1, -1, 1, -1})).item() == 1.0);
  CHECK(mean_square(Tensor({2}, {0, 0})).item() == 0.0);
  CHECK(mean_square(Tensor({2}, {3, 4})).item() == 12.5);
  CHECK_THROWS_AS(mean_square(Tensor()), DomainError);
  CHECK(finite_difference_check([](const Tensor& x) { return mean_square(x); }, Tensor({2}, {3, 4})) <= 1e-6);
}

TEST_CASE("finite difference check of sum is exact") {
  // exactly representable point and step
  CHECK(finite_difference_check([](const Tensor& x) { return sum(x); }, Tensor({5}, {1, 2, 3, 4, 5}),
                                std::ldexp(1.0, -16)) == 0.0);
  CHECK(finite_difference_check([](const Tensor& x) { return sum(x); }, randn({5}, 4)) <= 1e-9);
}

TEST_CASE("custom backward rules") {
  auto round_op = register_custom_backward(
      "round", 1,
      [](std::span<const Tensor> in) {
        Tensor y = in[0].detach();
        for (auto& v : y.data()) v = std::round(v);
        return y;
      },
      {[](const Tensor& g, std::span<const Tensor>, const Tensor&) { return g; }});
  Tensor x({3}, {0.2, 1.7, -2.4});
  x.set_requires_grad();
  Tensor y = round_op({x});
  CHECK(y[1] == 2.0);
  backward(sum(y));
  for (double g : x.grad_data()) CHECK(g == 1.0);

  auto stop = register_custom_backward(
      "stop", 1, [](std::span<const Tensor> in) { return in[0].detach(); },
      {[](const Tensor& g, std::span<const Tensor>, const Tensor&) { return Tensor(g.shape(), 0.0); }});
  Tensor z({2}, {1.0, 2.0});
  z.set_requires_grad();
  backward(sum(mul(stop({z}), stop({z}))));
  for (double g : z.grad_data()) CHECK(g == 0.0);

  auto square = register_custom_backward(
      "square", 1,
      [](std::span<const Tensor> in) { return mul(in[0], in[0]); },
      {[](const Tensor& g, std::span<const Tensor> in, const Tensor&) { return scale(mul(g, in[0]), 2.0); }});
  Tensor a = randn({6}, 8);
  a.set_requires_grad();
  Tensor w = randn({6}, 9);
  backward(sum(mul(square({a}), w)));
  Tensor custom = a.grad();
  Tensor b = a.detach();
  b.set_requires_grad();
  backward(sum(mul(mul(b, b), w)));
  CHECK(qt::max_abs_diff(custom, b.grad()) == 0.0);

  CHECK_THROWS_AS(register_custom_backward("bad", 2, [](std::span<const Tensor> in) { return in[0]; },
                                           {[](const Tensor& g, std::span<const Tensor>, const Tensor&) { return g; }}),
                  std::invalid_argument);
}

TEST_CASE("forward and backward are bit-identical across runs") {
  auto run = [] {
    Tensor x = randn({2, 3, 8, 8}, 21);
    Tensor w = randn({4, 3, 3, 3}, 22);
    w.set_requires_grad();
    Tensor y = relu(conv2d(x, w, 1, 1));
    Tensor loss = probe(avg_pool2d(y, 2), 23);
    backward(loss);
    return std::make_pair(loss.item(), w.grad());
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(qt::max_abs_diff(a.second, b.second) == 0.0);
}

TEST_CASE("thread count does not change results") {
  auto run = [] {
    Tensor x = randn({3, 3, 12, 12}, 31);
    Tensor w = randn({5, 3, 3, 3}, 32);
    w.set_requires_grad();
    backward(probe(conv2d(x, w, 1, 1), 33));
    return w.grad();
  };
  std::size_t saved = max_threads();
  set_max_threads(1);
  Tensor a = run();
  set_max_threads(4);
  Tensor b = run();
  set_max_threads(saved);
  CHECK(qt::max_abs_diff(a, b) == 0.0);
}
