// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <random>

#include "helpers.hpp"
#include "qsat/ops.hpp"
#include "qsat/quant.hpp"

using namespace qsat;

namespace {

// Value and d/dalpha of pact_quantize for a single element.
std::pair<double, double> pact_point(double x, double alpha, int bits, PactMode mode) {
  PactState st(alpha, bits, mode);
  Tensor xt({1}, {x});
  Tensor q = pact_quantize(xt, st);
  double v = q[0];
  backward(sum(q));
  return {v, st.alpha.grad()[0]};
}

double pact_value(double x, double alpha, int bits) {
  PactState st(alpha, bits, PactMode::Calibrated);
  NoGradGuard ng;
  return pact_quantize(Tensor({1}, {x}), st)[0];
}

}  // namespace

TEST_CASE("qk examples") {
  for (int b : {1, 2, 4, 8}) {
    CHECK(qk_value(0.0, b) == 0.0);
    CHECK(qk_value(1.0, b) == 1.0);
  }
  CHECK(qk_value(0.4, 2) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(qk_value(1.01, 4), DomainError);
  CHECK_THROWS_AS(qk_value(-0.01, 4), DomainError);
  CHECK(qk_value(1.0 + 5e-7, 4) == 1.0);
  CHECK(quant_levels(4) == 15);
  CHECK_THROWS_AS(quant_levels(0), DomainError);
}

TEST_CASE("qk properties over random cases") {
  auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int b : {1, 2, 4, 8}) {
    const double a = static_cast<double>(quant_levels(b));
    for (int i = 0; i < 1000; ++i) {
      double x = u(rng), y = u(rng);
      double q = qk_value(x, b);
      double idx = q * a;
      CHECK(std::abs(idx - std::round(idx)) < 1e-9);  // grid member
      CHECK(qk_value(q, b) == q);                      // idempotent
      if (x <= y) CHECK(qk_value(x, b) <= qk_value(y, b));
      else CHECK(qk_value(x, b) >= qk_value(y, b));
      CHECK(std::abs(q - x) <= 0.5 / a + 1e-12);
    }
  }
  // STE: gradient of qk is the identity
  Tensor x = qt::uniform({50}, 5, 0.0, 1.0);
  x.set_requires_grad();
  backward(sum(qk(x, 3)));
  for (double g : x.grad_data()) CHECK(g == 1.0);

  // 16-bit PACT tracks the hard clip
  std::normal_distribution<double> n(0.0, 3.0);
  for (int i = 0; i < 1000; ++i) {
    double alpha = 0.1 + 5.0 * u(rng);
    double xv = n(rng);
    double clip = std::clamp(xv, 0.0, alpha);
    CHECK(std::abs(pact_value(xv, alpha, 16) - clip) <= alpha / 65536.0);
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 10.0);
}

TEST_CASE("dorefa clamp examples") {
  Tensor w({4}, {2.0, -2.0, 0.0, 1.0});
  Tensor c = dorefa_clamp(w);
  CHECK(c[0] == doctest::Approx(1.0));
  CHECK(c[1] == doctest::Approx(0.0));
  CHECK(c[2] == 0.5);
  for (double v : c.data()) CHECK((v >= 0.0 && v <= 1.0));
  CHECK_THROWS_AS(dorefa_clamp(Tensor({3}, 0.0)), DegenerateError);
}

TEST_CASE("signed clamp and weight quantization examples") {
  Tensor s = signed_clamped(Tensor({3}, {0.5, 0.0, 1.0}));
  CHECK(s[0] == 0.0);
  CHECK(s[1] == -1.0);
  CHECK(s[2] == 1.0);
  Tensor wt = qt::uniform({100000}, 3, 0.0, 1.0);
  CHECK(mean_square(signed_clamped(wt)).item() == doctest::Approx(1.0 / 3.0).epsilon(0.02));

  Tensor q1 = quantize_weight(Tensor({2}, {0.3, 0.7}), 1);
  CHECK(q1[0] == -1.0);
  CHECK(q1[1] == 1.0);
  CHECK(quantize_weight(Tensor({1}, {0.4}), 2)[0] == doctest::Approx(-1.0 / 3.0).epsilon(1e-12));

  Tensor x({3}, {0.2, 0.6, 0.9});
  x.set_requires_grad();
  backward(sum(quantize_weight(x, 2)));
  for (double g : x.grad_data()) CHECK(g == 2.0);
}

TEST_CASE("constant rescale normalises and detaches the factor") {
  Tensor pm({1000});
  for (std::size_t i = 0; i < pm.size(); ++i) pm[i] = i % 2 ? 1.0 : -1.0;
  Tensor r = constant_rescale(pm, 1000);
  for (double v : r.data()) CHECK(std::abs(std::abs(v) - 1.0 / std::sqrt(1000.0)) < 1e-15);
  CHECK_THROWS_AS(constant_rescale(Tensor({4}, 0.0), 10), DegenerateError);

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::size_t n_hat = 10 + seed * 37;
    Tensor x = qt::randn({64}, seed, 0.3);
    CHECK(std::abs(mean_square(constant_rescale(x, n_hat)).item() * static_cast<double>(n_hat) - 1.0) <= 1e-10);
  }

  // backward is pure division by the detached scalar
  Tensor x = qt::randn({8}, 4);
  Tensor g = qt::randn({8}, 5);
  const std::size_t n_hat = 12;
  x.set_requires_grad();
  backward(sum(mul(constant_rescale(x, n_hat), g)));
  Tensor detached = x.grad();
  double f = constant_rescale_factor(x.data(), n_hat);
  for (std::size_t i = 0; i < 8; ++i) CHECK(detached[i] == doctest::Approx(g[i] * f).epsilon(1e-14));

  // full autodiff through the mean-square differs
  Tensor y = x.detach();
  y.set_requires_grad();
  Tensor denom = sqrt(scale(mean_square(y), static_cast<double>(n_hat)));
  backward(sum(mul(div_by(y, denom), g)));
  CHECK(qt::max_abs_diff(detached, y.grad()) > 1e-6);
}

TEST_CASE("stddev rescale") {
  Tensor w = qt::randn({500}, 8, 0.1);
  Tensor same = stddev_rescale(w, w);
  CHECK(qt::max_abs_diff(same, w) < 1e-15);
  Tensor what = signed_clamped(dorefa_clamp(w));
  Tensor ws = stddev_rescale(what, w);
  CHECK(mean_square(ws).item() == doctest::Approx(mean_square(w).item()).epsilon(1e-10));
  CHECK_THROWS_AS(stddev_rescale(Tensor({3}, 0.0), w), DegenerateError);

  // both rescales land on the same scale for Gaussian W with mean square 1/n_hat
  const std::size_t n_hat = 400;
  Tensor g = qt::randn({4000}, 9, 1.0 / std::sqrt(double(n_hat)));
  Tensor c = constant_rescale(what.detach(), n_hat);
  Tensor hat = signed_clamped(dorefa_clamp(g));
  double sc = constant_rescale_factor(hat.data(), n_hat);
  double ss = std::sqrt(mean_square(g).item() / mean_square(hat).item());
  CHECK(std::abs(sc / ss - 1.0) <= 0.05);
}

TEST_CASE("effective weight paths") {
  Tensor w = qt::randn({16, 8, 3, 3}, 12, 0.1);
  QuantScheme fp{std::nullopt, RescaleMode::None, 144, true};
  Tensor clamp_only = effective_weight(w, fp);
  CHECK(qt::max_abs_diff(clamp_only, signed_clamped(dorefa_clamp(w))) == 0.0);

  QuantScheme fpc{std::nullopt, RescaleMode::Constant, 144, true};
  CHECK(mean_square(effective_weight(w, fpc)).item() * 144.0 == doctest::Approx(1.0).epsilon(1e-10));

  QuantScheme q8{8, RescaleMode::None, 144, true};
  double r = mean_square(effective_weight(w, q8)).item() / mean_square(clamp_only).item();
  CHECK(std::abs(r - 1.0) < 0.01);

  // rescale uses the quantized tensor's mean square
  QuantScheme q2{2, RescaleMode::Constant, 144, true};
  Tensor q = quantize_weight(dorefa_clamp(w), 2);
  Tensor e = effective_weight(w, q2);
  double f = constant_rescale_factor(q.data(), 144);
  for (std::size_t i = 0; i < q.size(); ++i) CHECK(e[i] == doctest::Approx(q[i] * f).epsilon(1e-14));

  QuantScheme raw{std::nullopt, RescaleMode::None, 144, false};
  CHECK(qt::max_abs_diff(effective_weight(w, raw), w) == 0.0);

  QuantScheme bad{0, RescaleMode::None, 1, true};
  CHECK_THROWS_AS(bad.validate(), DomainError);
}

TEST_CASE("pact clip examples") {
  Tensor x({3}, {-1.0, 3.0, 1.0});
  x.set_requires_grad();
  Tensor y = pact_clip(x, 2.0);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 2.0);
  CHECK(y[2] == 1.0);
  backward(sum(y));
  CHECK(x.grad()[2] == 1.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[0] == 0.0);
  const double eps = 1e-3;
  NoGradGuard ng;
  CHECK(std::abs(pact_clip(Tensor({1}, {2.0 - eps}), 2.0)[0] - pact_clip(Tensor({1}, {2.0 + eps}), 2.0)[0]) <= 2 * eps);
  CHECK_THROWS_AS(pact_clip(x, 0.0), DomainError);
  CHECK_THROWS_AS(pact_clip(x, -1.0), DomainError);
}

TEST_CASE("pact quantize examples") {
  for (auto mode : {PactMode::Calibrated, PactMode::Legacy}) {
    auto [q, d] = pact_point(3.0, 2.0, 4, mode);
    CHECK(q == 2.0);
    CHECK(d == 1.0);
  }
  auto [q_cg, d_cg] = pact_point(0.8, 2.0, 2, PactMode::Calibrated);
  CHECK(q_cg == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(d_cg == doctest::Approx(1.0 / 3.0 - 0.4).epsilon(1e-12));
  auto [q_l, d_l] = pact_point(0.8, 2.0, 2, PactMode::Legacy);
  CHECK(q_l == q_cg);
  CHECK(d_l == 0.0);
  auto [q0, d0] = pact_point(0.0, 1.5, 3, PactMode::Calibrated);
  CHECK(q0 == 0.0);
  CHECK(d0 == 0.0);
  CHECK_THROWS_AS(pact_point(1.0, 0.0, 4, PactMode::Calibrated), DomainError);
}

TEST_CASE("calibrated alpha gradient matches the closed form on a grid") {
  for (int b : {1, 2, 3, 4, 8}) {
    for (double alpha : {0.5, 1.0, 2.0, 7.3}) {
      for (double frac : {0.0, 0.13, 0.25, 0.5, 0.77, 1.0, 1.5, 2.0}) {
        const double x = frac * alpha;
        const double xt = std::clamp(x, 0.0, alpha);
        const double expect = x >= alpha ? 1.0 : qk_value(xt / alpha, b) - xt / alpha;
        auto [q, cg] = pact_point(x, alpha, b, PactMode::Calibrated);
        auto [ql, lg] = pact_point(x, alpha, b, PactMode::Legacy);
        INFO("b=" << b << " alpha=" << alpha << " x=" << x);
        CHECK(cg == doctest::Approx(expect).epsilon(1e-12).scale(1.0));
        if (x < alpha) {
          CHECK(lg == 0.0);
          CHECK(cg - lg == qk_value(xt / alpha, b) - xt / alpha);
        } else {
          CHECK(lg == 1.0);
        }
        if (x > alpha) {
          const double h = 1e-6 * alpha;
          double fd = (pact_value(x, alpha + h, b) - pact_value(x, alpha - h, b)) / (2 * h);
          CHECK(std::abs(fd - cg) / std::abs(cg) <= 1e-5);
        }
      }
    }
  }
}

TEST_CASE("alpha gradients of a shared level are summed") {
  CHECK(alpha_grad_reduce(Tensor({5}, 0.0)) == 0.0);
  CHECK(alpha_grad_reduce(Tensor({4}, {1.0, 0.0, 0.0, 0.0})) == 1.0);
  Tensor x({4}, {0.3, 2.5, 3.0, 1.1});
  Tensor per = pact_alpha_grad_elements(x, 2.0, 2, PactMode::Calibrated);
  PactState st(2.0, 2, PactMode::Calibrated);
  backward(sum(pact_quantize(x, st)));
  CHECK(st.alpha.grad()[0] == doctest::Approx(alpha_grad_reduce(per)).epsilon(1e-14));
}

TEST_CASE("alpha floor") {
  PactState st(0.5, 4, PactMode::Calibrated);
  st.alpha[0] = -3.0;
  st.enforce_positive();
  CHECK(st.alpha_value() == kPactAlphaFloor);
}
