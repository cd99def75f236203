// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "qsat/network.hpp"
#include "qsat/ops.hpp"
#include "qsat/training.hpp"

namespace qt {

using namespace qsat;

// Weighted sum so every output element gets a distinct cotangent.
inline Tensor probe(const Tensor& y, std::uint64_t seed) {
  Tensor w = randn(y.shape(), seed ^ 0x9e3779b97f4a7c15ULL);
  return sum(mul(y, w));
}

struct FdCase {
  std::string name;
  std::function<Tensor(std::uint64_t)> point;
  std::function<Tensor(const Tensor&, std::uint64_t)> fn;
};

inline std::vector<FdCase> fd_cases() {
  auto plain = [](Shape s) { return [s](std::uint64_t seed) { return randn(s, seed); }; };
  auto positive = [](Shape s) { return [s](std::uint64_t seed) { return qt::uniform(s, seed, 0.5, 2.0); }; };
  auto nonzero = [](Shape s) { return [s](std::uint64_t seed) { return qt::away_from_zero(randn(s, seed)); }; };
  std::vector<FdCase> c;
  c.push_back({"add", plain({3, 4}), [](const Tensor& x, std::uint64_t s) { return probe(add(x, mul(x, x)), s); }});
  c.push_back({"sub", plain({3, 4}), [](const Tensor& x, std::uint64_t s) { return probe(sub(mul(x, x), x), s); }});
  c.push_back({"mul", plain({5}), [](const Tensor& x, std::uint64_t s) { return probe(mul(x, randn({5}, s + 1)), s); }});
  c.push_back({"scale", plain({5}), [](const Tensor& x, std::uint64_t s) { return probe(scale(x, -1.7), s); }});
  c.push_back({"add_scalar", plain({5}), [](const Tensor& x, std::uint64_t s) { return probe(mul(add_scalar(x, 0.3), x), s); }});
  c.push_back({"div_by", positive({6}), [](const Tensor& x, std::uint64_t s) {
                 return probe(div_by(x, mean_square(x)), s);
               }});
  c.push_back({"sqrt", positive({6}), [](const Tensor& x, std::uint64_t s) { return probe(sqrt(x), s); }});
  c.push_back({"tanh", plain({6}), [](const Tensor& x, std::uint64_t s) { return probe(tanh(x), s); }});
  c.push_back({"relu", nonzero({8}), [](const Tensor& x, std::uint64_t s) { return probe(relu(x), s); }});
  c.push_back({"sum", plain({7}), [](const Tensor& x, std::uint64_t) { return mul(sum(x), sum(x)); }});
  c.push_back({"mean", plain({7}), [](const Tensor& x, std::uint64_t) { return mul(mean(x), mean(x)); }});
  c.push_back({"mean_square", plain({7}), [](const Tensor& x, std::uint64_t) { return mean_square(x); }});
  c.push_back({"matmul", plain({3, 4}), [](const Tensor& x, std::uint64_t s) {
                 return probe(matmul(x, randn({4, 2}, s + 3)), s);
               }});
  c.push_back({"matmul_rhs", plain({4, 2}), [](const Tensor& x, std::uint64_t s) {
                 return probe(matmul(randn({3, 4}, s + 3), x), s);
               }});
  c.push_back({"linear", plain({5, 6}), [](const Tensor& x, std::uint64_t s) {
                 return probe(linear(x, randn({3, 6}, s + 5)), s);
               }});
  c.push_back({"linear_weight", plain({3, 6}), [](const Tensor& w, std::uint64_t s) {
                 return probe(linear(randn({5, 6}, s + 5), w), s);
               }});
  c.push_back({"conv2d", plain({2, 3, 8, 8}), [](const Tensor& x, std::uint64_t s) {
                 return probe(conv2d(x, randn({4, 3, 3, 3}, s + 7), 1, 1), s);
               }});
  c.push_back({"conv2d_weight", plain({4, 3, 3, 3}), [](const Tensor& w, std::uint64_t s) {
                 return probe(conv2d(randn({2, 3, 8, 8}, s + 7), w, 1, 0), s);
               }});
  c.push_back({"conv2d_stride2", plain({1, 2, 7, 7}), [](const Tensor& x, std::uint64_t s) {
                 return probe(conv2d(x, randn({3, 2, 3, 3}, s + 9), 2, 1), s);
               }});
  c.push_back({"avg_pool2d", plain({2, 2, 4, 4}), [](const Tensor& x, std::uint64_t s) { return probe(avg_pool2d(x, 2), s); }});
  c.push_back({"max_pool2d", plain({2, 2, 4, 4}), [](const Tensor& x, std::uint64_t s) { return probe(max_pool2d(x, 2), s); }});
  c.push_back({"flatten", plain({2, 2, 3, 3}), [](const Tensor& x, std::uint64_t s) { return probe(mul(flatten(x), flatten(x)), s); }});
  c.push_back({"reshape", plain({2, 6}), [](const Tensor& x, std::uint64_t s) { return probe(mul(x.reshape({3, 4}), x.reshape({3, 4})), s); }});
  c.push_back({"mul_channel", plain({3}), [](const Tensor& v, std::uint64_t s) {
                 return probe(mul_channel(randn({2, 3, 2, 2}, s + 11), v), s);
               }});
  c.push_back({"mul_channel_x", plain({2, 3, 2, 2}), [](const Tensor& x, std::uint64_t s) {
                 return probe(mul_channel(x, randn({3}, s + 11)), s);
               }});
  c.push_back({"add_channel", plain({3}), [](const Tensor& v, std::uint64_t s) {
                 return probe(mul(add_channel(randn({2, 3, 2, 2}, s + 13), v), add_channel(randn({2, 3, 2, 2}, s + 13), v)), s);
               }});
  c.push_back({"batchnorm", plain({4, 3, 5, 5}), [](const Tensor& x, std::uint64_t s) {
                 BatchNormState st(3);
                 return probe(batchnorm_forward(x, st, true), s);
               }});
  c.push_back({"batchnorm_gamma", plain({3}), [](const Tensor& g, std::uint64_t s) {
                 BatchNormState st(3);
                 st.gamma = g;
                 return probe(batchnorm_forward(randn({4, 3, 2, 2}, s + 17), st, true), s);
               }});
  c.push_back({"cross_entropy", plain({4, 10}), [](const Tensor& x, std::uint64_t) {
                 return cross_entropy(x, {0, 3, 9, 5});
               }});
  c.push_back({"pact_clip",
               [](std::uint64_t seed) {
                 Tensor x = qt::away_from_zero(randn({12}, seed));
                 for (auto& v : x.data())
                   if (std::abs(v - 1.0) < 1e-2) v = 1.02;
                 return x;
               },
               [](const Tensor& x, std::uint64_t s) { return probe(pact_clip(x, 1.0), s); }});
  return c;
}

}  // namespace qt
