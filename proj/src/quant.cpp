// SPDX-License-Identifier: Apache-2.0
#include "qsat/quant.hpp"

#include <algorithm>
#include <cmath>

#include "qsat/ops.hpp"

namespace qsat {

namespace {
constexpr double kDomainTolerance = 1e-6;
}

std::string to_string(RescaleMode mode) {
  switch (mode) {
    case RescaleMode::None: return "none";
    case RescaleMode::Constant: return "constant";
    case RescaleMode::Stddev: return "stddev";
  }
  return "none";
}

RescaleMode parse_rescale_mode(const std::string& text) {
  if (text == "none") return RescaleMode::None;
  if (text == "constant") return RescaleMode::Constant;
  if (text == "stddev") return RescaleMode::Stddev;
  throw DomainError("unknown rescale mode '" + text + "' (expected none|constant|stddev)");
}

std::int64_t quant_levels(int bits) {
  if (bits < 1 || bits > 30) throw DomainError("bit-width must be in [1, 30], got " + std::to_string(bits));
  return (std::int64_t{1} << bits) - 1;
}

std::int64_t QuantScheme::levels() const {
  if (!bits) throw DomainError("full-precision scheme has no quantization levels");
  return quant_levels(*bits);
}

void QuantScheme::validate() const {
  if (bits) {
    quant_levels(*bits);
    if (!clamp) throw DomainError("quantized weights require the tanh clamp");
  }
  if (rescale == RescaleMode::Constant && fan_out == 0) {
    throw DomainError("constant rescale requires fan_out >= 1");
  }
}

double qk_value(double x, int bits) {
  if (x < -kDomainTolerance || x > 1.0 + kDomainTolerance || std::isnan(x)) {
    throw DomainError("qk input " + std::to_string(x) + " outside [0, 1]");
  }
  const double a = static_cast<double>(quant_levels(bits));
  const double xc = std::clamp(x, 0.0, 1.0);
  return std::round(a * xc) / a;
}

Tensor qk(const Tensor& x, int bits) {
  quant_levels(bits);
  static const CustomOp ste = register_custom_backward(
      "qk_ste", 2,
      [](std::span<const Tensor> in) {
        const int b = static_cast<int>(in[1][0]);
        Tensor out(in[0].shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = qk_value(in[0][i], b);
        return out;
      },
      {[](const Tensor& g, std::span<const Tensor>, const Tensor&) { return g; },
       [](const Tensor&, std::span<const Tensor>, const Tensor&) { return Tensor(); }});
  return ste({x, Tensor::scalar(static_cast<double>(bits))});
}

Tensor dorefa_clamp(const Tensor& w) {
  if (w.empty()) throw DegenerateError("dorefa_clamp: empty weight tensor");
  Tensor t(w.shape());
  double peak = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    t[i] = std::tanh(w[i]);
    peak = std::max(peak, std::abs(t[i]));
  }
  if (peak == 0.0) throw DegenerateError("dorefa_clamp: all-zero weight tensor");
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = 0.5 * (t[i] / peak + 1.0);
  return record("dorefa_clamp", out, {w}, [t, peak](const Tensor& g) {
    Tensor gw(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gw[i] = g[i] * 0.5 * (1.0 - t[i] * t[i]) / peak;
    return std::vector<Tensor>{gw};
  });
}

Tensor signed_clamped(const Tensor& w_tilde) { return add_scalar(scale(w_tilde, 2.0), -1.0); }

Tensor quantize_weight(const Tensor& w_tilde, int bits) {
  return add_scalar(scale(qk(w_tilde, bits), 2.0), -1.0);
}

double constant_rescale_factor(std::span<const double> x, std::size_t n_hat) {
  if (n_hat == 0) throw DomainError("constant_rescale: n_hat must be positive");
  const double ms = mean_square_value(x);
  if (ms == 0.0) throw DegenerateError("constant_rescale: zero mean-square");
  return 1.0 / std::sqrt(static_cast<double>(n_hat) * ms);
}

Tensor constant_rescale(const Tensor& x, std::size_t n_hat) {
  return scale(x, constant_rescale_factor(x.data(), n_hat));
}

Tensor stddev_rescale(const Tensor& w_hat, const Tensor& w_orig) {
  const double ms_hat = mean_square_value(w_hat.data());
  const double ms_orig = mean_square_value(w_orig.data());
  if (ms_hat == 0.0 || ms_orig == 0.0) throw DegenerateError("stddev_rescale: zero mean-square");
  return scale(w_hat, std::sqrt(ms_orig / ms_hat));
}

Tensor effective_weight(const Tensor& w, const QuantScheme& scheme) {
  scheme.validate();
  Tensor base = w;
  if (scheme.clamp) {
    Tensor w_tilde = dorefa_clamp(w);
    base = scheme.bits ? quantize_weight(w_tilde, *scheme.bits) : signed_clamped(w_tilde);
  }
  switch (scheme.rescale) {
    case RescaleMode::None: return base;
    case RescaleMode::Constant: return constant_rescale(base, scheme.fan_out);
    case RescaleMode::Stddev: return stddev_rescale(base, w);
  }
  return base;
}

// ---------------------------------------------------------------------------
// PACT

std::string to_string(PactMode mode) { return mode == PactMode::Calibrated ? "cg" : "legacy"; }

PactMode parse_pact_mode(const std::string& text) {
  if (text == "cg" || text == "calibrated") return PactMode::Calibrated;
  if (text == "legacy") return PactMode::Legacy;
  throw DomainError("unknown PACT mode '" + text + "' (expected cg|legacy)");
}

PactState::PactState(double alpha0, int b, PactMode m) : alpha(Tensor::scalar(alpha0)), bits(b), mode(m) {
  if (!(alpha0 > 0.0)) throw DomainError("PACT alpha must be positive");
  quant_levels(b);
  alpha.set_requires_grad(true);
}

void PactState::enforce_positive() { alpha[0] = std::max(alpha[0], kPactAlphaFloor); }

namespace {
// Equal to 0.5 * (|x| - |x - alpha| + alpha), evaluated branch-wise so that
// saturated inputs map to exactly alpha.
inline double clip_value(double x, double alpha) { return std::clamp(x, 0.0, alpha); }
void require_positive_alpha(double alpha) {
  if (!(alpha > 0.0)) throw DomainError("PACT alpha must be positive, got " + std::to_string(alpha));
}
}  // namespace

Tensor pact_clip(const Tensor& x, const Tensor& alpha) {
  if (alpha.size() != 1) throw ShapeError("pact_clip: alpha must have one element");
  const double a = alpha[0];
  require_positive_alpha(a);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = clip_value(x[i], a);
  Tensor sx = x.detach();
  return record("pact_clip", out, {x, alpha}, [sx, a](const Tensor& g) {
    Tensor gx(g.shape());
    double ga = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (sx[i] > 0.0 && sx[i] < a) gx[i] = g[i];
      if (sx[i] >= a) ga += g[i];
    }
    return std::vector<Tensor>{gx, Tensor::scalar(ga)};
  });
}

Tensor pact_clip(const Tensor& x, double alpha) { return pact_clip(x, Tensor::scalar(alpha)); }

Tensor pact_alpha_grad_elements(const Tensor& x, double alpha, int bits, PactMode mode) {
  require_positive_alpha(alpha);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] >= alpha) {
      out[i] = 1.0;
    } else if (mode == PactMode::Calibrated) {
      const double u = clip_value(x[i], alpha) / alpha;
      out[i] = qk_value(u, bits) - u;
    } else {
      out[i] = 0.0;
    }
  }
  return out;
}

double alpha_grad_reduce(const Tensor& per_element) {
  double acc = 0.0;
  for (double v : per_element.data()) acc += v;
  return acc;
}

Tensor pact_quantize(const Tensor& x, const PactState& state) {
  const double a = state.alpha_value();
  require_positive_alpha(a);
  const int bits = state.bits;
  quant_levels(bits);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = clip_value(x[i], a) / a;
    out[i] = a * qk_value(u, bits);
  }
  Tensor sx = x.detach();
  const PactMode mode = state.mode;
  return record("pact_quantize", out, {x, state.alpha}, [sx, a, bits, mode](const Tensor& g) {
    Tensor gx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (sx[i] > 0.0 && sx[i] < a) gx[i] = g[i];
    }
    Tensor dq = pact_alpha_grad_elements(sx, a, bits, mode);
    for (std::size_t i = 0; i < g.size(); ++i) dq[i] *= g[i];
    return std::vector<Tensor>{gx, Tensor::scalar(alpha_grad_reduce(dq))};
  });
}

}  // namespace qsat
