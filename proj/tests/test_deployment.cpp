// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "helpers.hpp"
#include "qsat/deployment.hpp"
#include "qsat/training.hpp"

using namespace qsat;

namespace {

TrainConfig quant_config(int bits) {
  TrainConfig c;
  c.quant.weight_bits = bits;
  c.quant.act_bits = bits;
  c.train_size = 200;
  c.val_size = 200;
  return c;
}

// Random BN parameters, a few negative gains, and running statistics taken
// from one batch.
void randomise_and_calibrate(Model& m, const Dataset& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1, 1);
  for (std::size_t i = 0; i < m.graph().layers.size(); ++i) {
    auto& P = m.params(i);
    if (P.bn) {
      for (std::size_t ch = 0; ch < P.bn->gamma.size(); ++ch) {
        P.bn->gamma[ch] = U(rng) > -0.6 ? 0.5 + 0.4 * U(rng) : -0.7;
        P.bn->beta[ch] = 0.5 * U(rng);
      }
      P.bn->momentum = 1.0;
    }
    if (P.pact) P.pact->alpha[0] = 2.0 + U(rng);
  }
  std::vector<std::size_t> idx(100);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  NoGradGuard g;
  m.forward(batch_images(d, idx), true);
  m.round_to_storage();
}

std::size_t argmax_row(const Tensor& t, std::size_t row) {
  const std::size_t k = t.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (t[row * k + j] > t[row * k + best]) best = j;
  return best;
}

std::filesystem::path tmp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("checkpoint round trip") {
  TrainConfig c = quant_config(4);
  Model m = make_model(c);
  const auto p1 = tmp("qsat-rt-1.ckpt"), p2 = tmp("qsat-rt-2.ckpt");
  save_checkpoint(m, p1.string(), config_hash(c));
  Model back = load_checkpoint(p1.string());
  save_checkpoint(back, p2.string(), config_hash(c));
  auto bytes = [](const std::filesystem::path& p) {
    Checkpoint k = read_checkpoint(p.string());
    return encode_checkpoint(k);
  };
  CHECK(bytes(p1) == bytes(p2));
  CHECK(std::filesystem::file_size(p1) == std::filesystem::file_size(p2));
  CHECK(back.graph() == m.graph());
  auto a = m.tensors(), b = back.tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(qt::max_abs_diff(a[i].tensor, b[i].tensor) == 0.0);
  }
  Checkpoint k = read_checkpoint(p1.string());
  CHECK(k.config_hash == config_hash(c));
  std::size_t payload = 0;
  for (const auto& t : k.tensors) payload += 4 * shape_numel(t.shape);
  auto enc = encode_checkpoint(k);
  CHECK(enc.size() > payload);
  CHECK(std::string(enc.begin(), enc.begin() + 4) == "QSAT");
  const auto* w = k.find("block2.conv.weight");
  REQUIRE(w);
  CHECK(w->role == "weight");
  CHECK(k.find("block2.conv.bn.running_var")->role == "bn_var");
  CHECK(k.find("block2.act.alpha")->role == "alpha");
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("corrupted containers are rejected") {
  Model m = make_model(quant_config(4));
  auto bytes = encode_checkpoint(checkpoint_from_model(m, "abc"));
  CHECK_NOTHROW(decode_checkpoint(bytes));

  auto flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  CHECK_THROWS_AS(decode_checkpoint(flipped), FormatError);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic), FormatError);

  auto version = bytes;
  version[4] = 99;
  CHECK_THROWS_AS(decode_checkpoint(version), FormatError);

  auto longer = bytes;
  longer.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(longer), FormatError);

  CHECK_THROWS_AS(decode_checkpoint({}), FormatError);
  CHECK_THROWS_AS(read_checkpoint("/nonexistent/qsat.ckpt"), FormatError);
}

TEST_CASE("full-precision checkpoint initialises a 4-bit model") {
  TrainConfig fp;
  Model src = make_model(fp);
  Checkpoint k = checkpoint_from_model(src, config_hash(fp));
  TrainConfig q = quant_config(4);
  Model dst = make_model(q);
  auto missing = load_into(dst, k);
  CHECK(!missing.empty());  // PACT levels are new
  for (const auto& name : missing) CHECK(name.find(".alpha") != std::string::npos);
  CHECK(dst.graph().layers[dst.graph().linear_layers()[1]].weight.bits == 4);
  auto a = src.tensors();
  for (auto& t : dst.tensors()) {
    for (auto& s : a)
      if (s.name == t.name) CHECK(qt::max_abs_diff(s.tensor, t.tensor) == 0.0);
  }
  TrainConfig wide = fp;
  wide.width = 8;
  Model other = make_model(wide);
  CHECK_THROWS_AS(load_into(other, k), FormatError);
}

TEST_CASE("graph json round trip") {
  for (const auto& name : preset_names()) {
    ModelGraph g = build_preset(name);
    CHECK(graph_from_json(graph_to_json(g)) == g);
  }
  CHECK_THROWS_AS(graph_from_json(nlohmann::json::parse(R"({"preset": 3})")), FormatError);
}

TEST_CASE("folded and unfolded paths agree") {
  TrainConfig c = quant_config(8);
  auto d = load_data(c);
  Model m = make_model(c);
  randomise_and_calibrate(m, d.train, 3);
  FoldedModel fm = fold_bn(m);
  CHECK(fm.layers.size() == 6);

  double worst = 0;
  std::size_t checked = 0, agree = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    std::vector<std::size_t> one{i};
    Tensor x = batch_images(d.val, one);
    ForwardTrace tr;
    Tensor ref;
    {
      NoGradGuard g;
      ref = m.forward(x, false, &tr);
    }
    Tensor f = folded_forward(fm, x);
    Tensor n = integer_forward(fm, x);
    if (tr.min_tie_distance < 1e-6) continue;
    ++checked;
    for (std::size_t j = 0; j < ref.size(); ++j) worst = std::max(worst, std::abs(ref[j] - fm.head.head_rescale * f[j]));
    agree += argmax_row(ref, 0) == argmax_row(n, 0);
    CHECK(argmax_row(ref, 0) == argmax_row(f, 0));
  }
  CHECK(checked >= 90);
  CHECK(worst <= 1e-5);
  CHECK(double(agree) / double(checked) >= 0.99);

  // zero input: only the folded offsets propagate
  Tensor zero({1, 3, 32, 32}, 0.0);
  Tensor ref0;
  {
    NoGradGuard g;
    ref0 = m.forward(zero, false);
  }
  Tensor f0 = folded_forward(fm, zero);
  for (std::size_t j = 0; j < ref0.size(); ++j) CHECK(std::abs(ref0[j] - fm.head.head_rescale * f0[j]) <= 1e-5);

  CHECK_THROWS_AS(integer_forward(fm, Tensor({1, 3, 32, 32}, 0.5)), DomainError);
  CHECK_THROWS_AS(integer_forward(fm, Tensor({1, 3, 32, 32}, 256.0)), DomainError);
}

TEST_CASE("transparent batch norm folds to zero offsets") {
  TrainConfig c = quant_config(8);
  Model m = make_model(c);
  FoldedModel fm = fold_bn(m);
  const auto& g = m.graph();
  const auto lin = g.linear_layers();
  const double gain = 1.0 / std::sqrt(1.0 + kBnEpsilon);
  for (std::size_t l = 0; l < fm.layers.size(); ++l) {
    const auto& F = fm.layers[l];
    const double alpha = m.params(lin[l] + 2).pact->alpha_value();
    for (std::size_t ch = 0; ch < F.out_channels; ++ch) {
      CHECK(F.offset[ch] == 0.0);
      CHECK(F.clip[ch] == doctest::Approx(alpha * double(F.weight_levels) / (gain * F.in_scale)).epsilon(1e-12));
    }
  }
  CHECK(fm.layers[0].in_scale == 1.0);
  CHECK(fm.layers[1].in_scale == doctest::Approx(kPactAlphaInit / 255.0 / 4.0));
  auto d = load_data(c);
  std::vector<std::size_t> idx{0, 1, 2, 3};
  Tensor x = batch_images(d.val, idx);
  ForwardTrace tr;
  Tensor ref;
  {
    NoGradGuard ng;
    ref = m.forward(x, false, &tr);
  }
  if (tr.min_tie_distance >= 1e-6) {
    Tensor f = folded_forward(fm, x);
    for (std::size_t j = 0; j < ref.size(); ++j) CHECK(std::abs(ref[j] - fm.head.head_rescale * f[j]) <= 1e-5);
  }
}

TEST_CASE("dropping the head rescale keeps the argmax") {
  TrainConfig c = quant_config(8);
  auto d = load_data(c);
  Model m = make_model(c);
  randomise_and_calibrate(m, d.train, 9);
  FoldedModel fm = fold_bn(m);
  CHECK(fm.head.head_rescale > 0);
  CHECK(fm.head.head_rescale != 1.0);
  std::vector<std::size_t> idx(50);
  for (std::size_t i = 0; i < 50; ++i) idx[i] = i;
  Tensor x = batch_images(d.val, idx);
  Tensor ref;
  {
    NoGradGuard ng;
    ref = m.forward(x, false);
  }
  Tensor f = folded_forward(fm, x);
  for (std::size_t i = 0; i < 50; ++i) CHECK(argmax_row(ref, i) == argmax_row(f, i));
}

TEST_CASE("integer path is exact with power-of-two scales") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> w(-3, 3);
  FoldedModel fm;
  fm.in_channels = 3;
  fm.image_size = 4;
  fm.classes = 3;
  FoldedLayer F;
  F.name = "conv";
  F.in_channels = 3;
  F.out_channels = 2;
  F.kernel = 3;
  F.pad = 1;
  F.weight_levels = 3;
  F.act_levels = 15;
  for (int i = 0; i < 2 * 3 * 9; ++i) F.int_weight.push_back(w(rng));
  F.offset = {-16.0, 32.0};
  F.clip = {240.0, 240.0};
  F.multiplier = {1.0 / 16.0, 1.0 / 16.0};
  F.pool = PoolKind::Avg;
  F.pool_kernel = 2;
  fm.layers.push_back(F);
  fm.head.name = "fc";
  fm.head.in_features = 2 * 2 * 2;
  fm.head.out_features = 3;
  fm.head.weight_levels = 3;
  for (int i = 0; i < 3 * 8; ++i) fm.head.int_weight.push_back(w(rng));
  fm.head.logit_scale = 1.0 / 64.0;
  std::uniform_int_distribution<int> px(0, 255);
  Tensor x({5, 3, 4, 4});
  for (auto& v : x.data()) v = px(rng);
  Tensor a = folded_forward(fm, x);
  Tensor b = integer_forward(fm, x);
  CHECK(qt::max_abs_diff(a, b) == 0.0);
  double spread = 0;
  for (double v : a.data()) spread = std::max(spread, std::abs(v));
  CHECK(spread > 0);

  FoldedModel huge = fm;
  huge.layers[0].weight_levels = std::int64_t{1} << 60;
  CHECK_THROWS_AS(integer_forward(huge, x), OverflowError);
}

TEST_CASE("folding applicability") {
  TrainConfig r = quant_config(4);
  r.preset = "preresnet-toy";
  Model res = make_model(r);
  try {
    fold_bn(res);
    FAIL("residual model folded");
  } catch (const ApplicabilityError& e) {
    CHECK(std::string(e.what()).find("res1.bn1") != std::string::npos);
  }

  TrainConfig fp;
  Model unq = make_model(fp);
  CHECK_THROWS_AS(fold_bn(unq), ApplicabilityError);

  TrainConfig tail = quant_config(4);
  tail.preset = "convnet-nobn-tail";
  Model t = make_model(tail);
  CHECK_THROWS_AS(fold_bn(t), ApplicabilityError);

  Model zero = make_model(quant_config(4));
  zero.params(1).bn->gamma[2] = 0.0;
  CHECK_THROWS_AS(fold_bn(zero), DegenerateError);

  Model ok = make_model(quant_config(4));
  FoldedModel fm = fold_bn(ok);
  Checkpoint folded = checkpoint_from_folded(fm, ok.graph(), "h");
  CHECK(folded.kind == "folded");
  CHECK_THROWS_AS(fold_bn(folded), ApplicabilityError);
  CHECK_THROWS_AS(load_into(ok, folded), FormatError);
  for (const auto& t2 : folded.tensors) {
    bool known = t2.role == "int_weight" || t2.role == "offset" || t2.role == "clip" || t2.role == "scale";
    CHECK(known);
  }

  // folded container round trip
  auto bytes = encode_checkpoint(folded);
  FoldedModel back = folded_from_checkpoint(decode_checkpoint(bytes));
  CHECK(back.layers.size() == fm.layers.size());
  CHECK(back.layers[2].int_weight == fm.layers[2].int_weight);
  CHECK(back.head.int_weight == fm.head.int_weight);
  CHECK(back.layers[1].offset[0] == double(float(fm.layers[1].offset[0])));
  CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);
  CHECK_NOTHROW(fold_bn(checkpoint_from_model(ok, "h")));
}
