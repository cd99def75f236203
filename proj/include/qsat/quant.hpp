// SPDX-License-Identifier: Apache-2.0
//
// Weight and activation quantizers for quantization-aware training.
//
// Weights follow the DoReFa path: a latent weight W is squashed into [0, 1]
// by a tanh normalisation, optionally rounded onto a uniform grid, mapped to
// [-1, 1], and optionally rescaled so that n_hat * mean_square(Xi) == 1
// (scale-adjusted training). The rescale factor never receives gradient.
//
// Activations use PACT: clip to [0, alpha], quantize x / alpha onto the grid,
// scale back by alpha. alpha is trainable; its gradient either includes the
// quantization error term (CG) or drops it (LEGACY).
#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "qsat/tensor.hpp"

namespace qsat {

enum class RescaleMode { None, Constant, Stddev };

std::string to_string(RescaleMode mode);
RescaleMode parse_rescale_mode(const std::string& text);

// How a raw weight becomes the effective weight used by a linear layer.
struct QuantScheme {
  // Bit-width b; std::nullopt is full precision.
  std::optional<int> bits;
  RescaleMode rescale = RescaleMode::None;
  // Output neurons c_out * k^2, used by the constant rescale.
  std::size_t fan_out = 1;
  // Apply the tanh clamp. Full-precision runs without the clamp use W directly.
  bool clamp = true;

  bool quantized() const { return bits.has_value(); }
  // a = 2^b - 1. Only valid for quantized schemes.
  std::int64_t levels() const;
  // Throws DomainError on b < 1 or fan_out == 0 with a constant rescale.
  void validate() const;

  bool operator==(const QuantScheme&) const = default;
};

// a = 2^b - 1 for b >= 1.
std::int64_t quant_levels(int bits);

// round(a * x) / a for x in [0, 1], ties away from zero. Backward is the
// straight-through estimator (identity). Inputs outside [0, 1] by more than
// 1e-6 raise DomainError; smaller excursions are clamped.
Tensor qk(const Tensor& x, int bits);
double qk_value(double x, int bits);

// 0.5 * (tanh(W) / max|tanh(W)| + 1). The per-tensor max is a detached
// constant. Throws DegenerateError if every element of W is zero.
Tensor dorefa_clamp(const Tensor& w);

// 2 * w_tilde - 1.
Tensor signed_clamped(const Tensor& w_tilde);

// 2 * qk(w_tilde, b) - 1. Backward is 2 x STE.
Tensor quantize_weight(const Tensor& w_tilde, int bits);

// x / sqrt(n_hat * mean_square(x)); the denominator is detached.
Tensor constant_rescale(const Tensor& x, std::size_t n_hat);
// Value of 1 / sqrt(n_hat * mean_square(x)).
double constant_rescale_factor(std::span<const double> x, std::size_t n_hat);

// sqrt(mean_square(w_orig) / mean_square(w_hat)) * w_hat, factor detached.
Tensor stddev_rescale(const Tensor& w_hat, const Tensor& w_orig);

// Effective weight Xi for scheme. Quantized schemes rescale using the
// mean-square of the quantized tensor.
Tensor effective_weight(const Tensor& w, const QuantScheme& scheme);

// ---------------------------------------------------------------------------
// PACT

enum class PactMode { Calibrated, Legacy };

std::string to_string(PactMode mode);
PactMode parse_pact_mode(const std::string& text);

inline constexpr double kPactAlphaInit = 8.0;
inline constexpr double kPactAlphaFloor = 1e-3;

struct PactState {
  // One-element trainable tensor.
  Tensor alpha = Tensor::scalar(kPactAlphaInit);
  int bits = 4;
  PactMode mode = PactMode::Calibrated;

  PactState() { alpha.set_requires_grad(true); }
  PactState(double alpha0, int b, PactMode m);

  double alpha_value() const { return alpha[0]; }
  // alpha <- max(alpha, 1e-3). Called after every optimizer step.
  void enforce_positive();
};

// 0.5 * (|x| - |x - alpha| + alpha). Gradient w.r.t. x is the indicator of
// 0 < x < alpha; w.r.t. alpha it is the indicator of x >= alpha.
Tensor pact_clip(const Tensor& x, const Tensor& alpha);
Tensor pact_clip(const Tensor& x, double alpha);

// alpha * qk(pact_clip(x, alpha) / alpha, b) with STE through qk.
Tensor pact_quantize(const Tensor& x, const PactState& state);

// Per-element dq/dalpha used by pact_quantize's backward: for x >= alpha it
// is 1; below alpha it is qk(x~/alpha) - x~/alpha (Calibrated) or 0 (Legacy).
Tensor pact_alpha_grad_elements(const Tensor& x, double alpha, int bits, PactMode mode);

// Shared-parameter accumulation of per-element alpha gradients.
double alpha_grad_reduce(const Tensor& per_element);

}  // namespace qsat
