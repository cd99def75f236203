// SPDX-License-Identifier: Apache-2.0
#include "qsat/network.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "qsat/ops.hpp"

namespace qsat {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::FC: return "fc";
    case LayerKind::BN: return "bn";
    case LayerKind::ReLU: return "relu";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::MaxPool: return "maxpool";
  }
  return "conv";
}

LayerKind parse_layer_kind(const std::string& text) {
  for (auto k : {LayerKind::Conv, LayerKind::FC, LayerKind::BN, LayerKind::ReLU, LayerKind::AvgPool,
                 LayerKind::MaxPool}) {
    if (to_string(k) == text) return k;
  }
  throw ShapeError("unknown layer kind '" + text + "'");
}

std::string to_string(RescalePolicy policy) {
  switch (policy) {
    case RescalePolicy::Auto: return "auto";
    case RescalePolicy::None: return "none";
    case RescalePolicy::LastOnly: return "last";
    case RescalePolicy::All: return "all";
  }
  return "auto";
}

RescalePolicy parse_rescale_policy(const std::string& text) {
  if (text == "auto") return RescalePolicy::Auto;
  if (text == "none") return RescalePolicy::None;
  if (text == "last") return RescalePolicy::LastOnly;
  if (text == "all") return RescalePolicy::All;
  throw DomainError("unknown rescale policy '" + text + "' (expected auto|none|last|all)");
}

std::string to_string(ParamRole role) {
  switch (role) {
    case ParamRole::Weight: return "weight";
    case ParamRole::Alpha: return "alpha";
    case ParamRole::BnGamma: return "bn_gamma";
    case ParamRole::BnBeta: return "bn_beta";
    case ParamRole::BnMean: return "bn_mean";
    case ParamRole::BnVar: return "bn_var";
  }
  return "weight";
}

ParamRole parse_param_role(const std::string& text) {
  for (auto r : {ParamRole::Weight, ParamRole::Alpha, ParamRole::BnGamma, ParamRole::BnBeta,
                 ParamRole::BnMean, ParamRole::BnVar}) {
    if (to_string(r) == text) return r;
  }
  throw DomainError("unknown tensor role '" + text + "'");
}

// ---------------------------------------------------------------------------
// Graph queries

std::vector<std::size_t> ModelGraph::linear_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].is_linear()) out.push_back(i);
  return out;
}

std::size_t ModelGraph::pool_after(std::size_t index) const {
  std::size_t k = 1;
  for (std::size_t i = index + 1; i < layers.size() && !layers[i].is_linear(); ++i) {
    if (layers[i].kind == LayerKind::AvgPool) k *= layers[i].pool_kernel;
  }
  return k;
}

std::size_t ModelGraph::pool_before_head() const {
  auto lin = linear_layers();
  if (lin.size() < 2) return 1;
  return pool_after(lin[lin.size() - 2]);
}

bool ModelGraph::skip_adjacent(std::size_t linear_index) const {
  auto lin = linear_layers();
  auto it = std::find(lin.begin(), lin.end(), linear_index);
  if (it == lin.end() || it + 1 == lin.end()) return false;
  const std::size_t l = *it, m = *(it + 1);
  for (const auto& s : skips) {
    if ((s.to >= l && s.to < m) || (s.from > l && s.from <= m)) return true;
  }
  return false;
}

std::vector<std::string> ModelGraph::violations() const {
  std::vector<std::string> out;
  auto lin = linear_layers();
  for (std::size_t i : lin) {
    const auto& L = layers[i];
    if (!L.follows_bn && L.weight.clamp && L.weight.rescale == RescaleMode::None) {
      out.push_back("layer " + L.name +
                    ": no BN follows and weights are clamped/quantized without rescale (ETR II)");
    }
  }
  if (!lin.empty()) {
    for (std::size_t i : {lin.front(), lin.back()}) {
      const auto& L = layers[i];
      if (L.weight.bits && *L.weight.bits < 8) {
        out.push_back("layer " + L.name + ": first/last layer weights below the 8-bit minimum (" +
                      std::to_string(*L.weight.bits) + " bits)");
      }
    }
  }
  return out;
}

void check_structure(const ModelGraph& g) {
  if (g.layers.empty()) throw ShapeError("model has no layers");
  const auto& head = g.layers.back();
  if (head.kind != LayerKind::FC) throw ShapeError("model must end in a fully-connected head");
  if (head.out_channels != g.classes) {
    throw ShapeError("head produces " + std::to_string(head.out_channels) + " logits for " +
                     std::to_string(g.classes) + " classes");
  }
  std::size_t fcs = 0;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& L = g.layers[i];
    if (L.kind == LayerKind::FC) ++fcs;
    if (L.is_linear()) {
      bool next_bn = i + 1 < g.layers.size() && g.layers[i + 1].kind == LayerKind::BN;
      for (const auto& s : g.skips)
        if (s.to == i) next_bn = false;  // the residual add sits in between
      if (L.follows_bn != next_bn) throw ShapeError("layer " + L.name + ": follows_bn disagrees with graph");
      if (L.in_channels == 0 || L.out_channels == 0 || L.kernel == 0) {
        throw ShapeError("layer " + L.name + ": empty geometry");
      }
    }
  }
  if (fcs != 1) throw ShapeError("model must have exactly one fully-connected head");
  for (const auto& s : g.skips) {
    if (s.from > s.to || s.to >= g.layers.size()) throw ShapeError("invalid skip connection");
  }
}

// ---------------------------------------------------------------------------
// Quantization settings

void apply_quant_config(ModelGraph& graph, const QuantConfig& cfg) {
  auto lin = graph.linear_layers();
  for (std::size_t idx = 0; idx < lin.size(); ++idx) {
    auto& L = graph.layers[lin[idx]];
    const bool edge = idx == 0 || idx + 1 == lin.size();
    const bool last = idx + 1 == lin.size();
    QuantScheme s;
    s.bits = cfg.weight_bits;
    if (s.bits && edge && cfg.first_last_bits) s.bits = std::max(*s.bits, *cfg.first_last_bits);
    s.clamp = cfg.clamp || s.bits.has_value();
    s.fan_out = L.fan_out();
    bool rescale = false;
    switch (cfg.rescale) {
      case RescalePolicy::Auto: rescale = !L.follows_bn; break;
      case RescalePolicy::None: rescale = false; break;
      case RescalePolicy::LastOnly: rescale = last; break;
      case RescalePolicy::All: rescale = true; break;
    }
    s.rescale = rescale ? cfg.method : RescaleMode::None;
    s.validate();
    L.weight = s;
  }
  for (auto& L : graph.layers) {
    if (L.kind == LayerKind::ReLU) {
      L.act_bits = cfg.act_bits;
      L.pact_mode = cfg.pact_mode;
    }
  }
}

// ---------------------------------------------------------------------------
// Presets

namespace {

struct Builder {
  ModelGraph g;
  std::size_t channels;
  std::size_t extent;

  void conv(std::size_t out, bool bn, const std::string& name) {
    LayerSpec L;
    L.kind = LayerKind::Conv;
    L.name = name;
    L.in_channels = channels;
    L.out_channels = out;
    L.kernel = 3;
    L.pad = 1;
    L.follows_bn = bn;
    g.layers.push_back(L);
    channels = out;
    if (bn) this->bn(name + ".bn");
  }
  void bn(const std::string& name) {
    LayerSpec L;
    L.kind = LayerKind::BN;
    L.name = name;
    L.in_channels = L.out_channels = channels;
    g.layers.push_back(L);
  }
  void relu(const std::string& name) {
    LayerSpec L;
    L.kind = LayerKind::ReLU;
    L.name = name;
    g.layers.push_back(L);
  }
  void pool(std::size_t k, const std::string& name) {
    LayerSpec L;
    L.kind = LayerKind::AvgPool;
    L.name = name;
    L.pool_kernel = k;
    g.layers.push_back(L);
    extent /= k;
  }
  void fc(std::size_t out, const std::string& name) {
    LayerSpec L;
    L.kind = LayerKind::FC;
    L.name = name;
    L.in_channels = channels * extent * extent;
    L.out_channels = out;
    g.layers.push_back(L);
  }
};

}  // namespace

std::vector<std::string> preset_names() { return {"convnet-bn", "convnet-nobn-tail", "preresnet-toy"}; }

ModelGraph build_preset(const std::string& name, const PresetOptions& o) {
  if (o.image_size % 4 != 0 || o.image_size < 8) {
    throw ShapeError("preset image size must be a multiple of 4 and at least 8");
  }
  if (o.width == 0 || o.classes < 2 || o.in_channels == 0) throw ShapeError("invalid preset options");
  Builder b{ModelGraph{}, o.in_channels, o.image_size};
  b.g.preset = name;
  b.g.in_channels = o.in_channels;
  b.g.image_size = o.image_size;
  b.g.classes = o.classes;
  b.g.width = o.width;
  const std::size_t w = o.width;

  if (name == "convnet-bn" || name == "convnet-nobn-tail") {
    const bool tail_bn = name == "convnet-bn";
    const std::size_t widths[6] = {w, w, 2 * w, 2 * w, 2 * w, 2 * w};
    for (int i = 0; i < 6; ++i) {
      const std::string base = "block" + std::to_string(i + 1);
      b.conv(widths[i], i < 5 || tail_bn, base + ".conv");
      b.relu(base + ".act");
      if (i == 0 || i == 2) b.pool(2, base + ".pool");
      if (i == 4 && b.extent % 2 == 0 && b.extent >= 8) b.pool(2, base + ".pool");
      if (i == 5) b.pool(b.extent, base + ".pool");
    }
    b.fc(o.classes, "head.fc");
  } else if (name == "preresnet-toy") {
    b.conv(w, false, "stem.conv");
    b.pool(2, "stem.pool");
    for (int r = 0; r < 2; ++r) {
      const std::string base = "res" + std::to_string(r + 1);
      const std::size_t from = b.g.layers.size();
      b.bn(base + ".bn1");
      b.relu(base + ".act1");
      b.conv(w, true, base + ".conv1");
      b.relu(base + ".act2");
      b.conv(w, false, base + ".conv2");
      b.g.skips.push_back({from, b.g.layers.size() - 1});
    }
    b.bn("final.bn");
    b.relu("final.act");
    b.pool(b.extent, "final.pool");
    b.fc(o.classes, "head.fc");
  } else {
    throw ShapeError("unknown preset '" + name + "' (expected convnet-bn|convnet-nobn-tail|preresnet-toy)");
  }
  check_structure(b.g);
  apply_quant_config(b.g, QuantConfig{});
  return b.g;
}

// ---------------------------------------------------------------------------
// Batch norm

BatchNormState::BatchNormState(std::size_t channels)
    : gamma({channels}, 1.0), beta({channels}, 0.0), running_mean({channels}, 0.0),
      running_var({channels}, 1.0) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

Tensor batchnorm_forward(const Tensor& z, BatchNormState& st, bool training) {
  if ((z.rank() != 2 && z.rank() != 4) || z.dim(1) != st.gamma.size()) {
    throw ShapeError("batchnorm: input " + shape_str(z.shape()) + " does not match " +
                     std::to_string(st.gamma.size()) + " channels");
  }
  const std::size_t n = z.dim(0), c = z.dim(1), plane = z.size() / (n * c);
  const double m = static_cast<double>(n * plane);
  if (training && n < 2) throw DomainError("batchnorm: training mode needs a batch of at least 2");

  std::vector<double> mu(c), invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double var;
    if (training) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) s += z[(i * c + ch) * plane + p];
      mu[ch] = s / m;
      double q = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = z[(i * c + ch) * plane + p] - mu[ch];
          q += d * d;
        }
      var = q / m;
      st.running_mean[ch] = (1.0 - st.momentum) * st.running_mean[ch] + st.momentum * mu[ch];
      st.running_var[ch] = (1.0 - st.momentum) * st.running_var[ch] + st.momentum * q / (m - 1.0);
    } else {
      mu[ch] = st.running_mean[ch];
      var = st.running_var[ch];
    }
    invstd[ch] = 1.0 / std::sqrt(var + st.epsilon);
  }

  Tensor xhat(z.shape()), out(z.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = (i * c + ch) * plane + p;
        xhat[idx] = (z[idx] - mu[ch]) * invstd[ch];
        out[idx] = st.gamma[ch] * xhat[idx] + st.beta[ch];
      }

  Tensor gamma = st.gamma.detach();
  return record("batchnorm", out, {z, st.gamma, st.beta},
                [xhat, gamma, invstd, n, c, plane, m, training](const Tensor& g) {
                  Tensor gz(g.shape()), gg({c}), gb({c});
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t p = 0; p < plane; ++p) {
                        const std::size_t idx = (i * c + ch) * plane + p;
                        sum_g += g[idx];
                        sum_gx += g[idx] * xhat[idx];
                      }
                    gg[ch] = sum_gx;
                    gb[ch] = sum_g;
                    const double k = gamma[ch] * invstd[ch];
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t p = 0; p < plane; ++p) {
                        const std::size_t idx = (i * c + ch) * plane + p;
                        gz[idx] = training ? k * (g[idx] - sum_g / m - xhat[idx] * sum_gx / m)
                                           : k * g[idx];
                      }
                  }
                  return std::vector<Tensor>{gz, gg, gb};
                });
}

// ---------------------------------------------------------------------------
// Model

float to_storage(double v) { return static_cast<float>(v); }

Model::Model(ModelGraph graph) : graph_(std::move(graph)) {
  check_structure(graph_);
  params_.resize(graph_.layers.size());
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    const auto& L = graph_.layers[i];
    auto& P = params_[i];
    if (L.kind == LayerKind::Conv) {
      P.weight = Tensor({L.out_channels, L.in_channels, L.kernel, L.kernel});
    } else if (L.kind == LayerKind::FC) {
      P.weight = Tensor({L.out_channels, L.in_channels});
    } else if (L.kind == LayerKind::BN) {
      P.bn.emplace(L.out_channels);
    }
    if (L.is_linear()) P.weight.set_requires_grad(true);
  }
  sync_pact();
}

Model Model::clone() const {
  Model m(graph_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = params_[i];
    auto& dst = m.params_[i];
    if (!src.weight.empty()) std::copy(src.weight.data().begin(), src.weight.data().end(), dst.weight.data().begin());
    if (src.bn) {
      auto copy = [](const Tensor& a, Tensor& b) { std::copy(a.data().begin(), a.data().end(), b.data().begin()); };
      copy(src.bn->gamma, dst.bn->gamma);
      copy(src.bn->beta, dst.bn->beta);
      copy(src.bn->running_mean, dst.bn->running_mean);
      copy(src.bn->running_var, dst.bn->running_var);
    }
    if (src.pact) dst.pact->alpha[0] = src.pact->alpha_value();
  }
  return m;
}

void Model::sync_pact() {
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    const auto& L = graph_.layers[i];
    auto& P = params_[i];
    if (L.kind != LayerKind::ReLU) continue;
    if (!L.act_bits) {
      P.pact.reset();
      continue;
    }
    const double alpha = P.pact ? P.pact->alpha_value() : kPactAlphaInit;
    P.pact.emplace(alpha, *L.act_bits, L.pact_mode);
  }
}

void Model::apply(const QuantConfig& cfg) {
  apply_quant_config(graph_, cfg);
  sync_pact();
}

void Model::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    const auto& L = graph_.layers[i];
    auto& P = params_[i];
    if (L.is_linear()) {
      std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(L.fan_out())));
      for (auto& v : P.weight.data()) v = dist(rng);
    } else if (L.kind == LayerKind::BN) {
      *P.bn = BatchNormState(L.out_channels);
    } else if (P.pact) {
      P.pact->alpha[0] = kPactAlphaInit;
    }
  }
  round_to_storage();
}

Tensor Model::forward(const Tensor& x, bool training, ForwardTrace* trace) {
  if (x.rank() != 4 || x.dim(1) != graph_.in_channels) {
    throw ShapeError("model expects N x " + std::to_string(graph_.in_channels) + " x H x W input, got " +
                     shape_str(x.shape()));
  }
  if (trace) {
    trace->effective.assign(graph_.layers.size(), Tensor());
    trace->min_tie_distance = 1e300;
  }
  std::map<std::size_t, Tensor> saved;
  Tensor h = x;
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    const auto& L = graph_.layers[i];
    auto& P = params_[i];
    for (const auto& s : graph_.skips)
      if (s.from == i) saved[i] = h;

    switch (L.kind) {
      case LayerKind::Conv: {
        Tensor xi = effective_weight(P.weight, L.weight);
        if (trace) trace->effective[i] = xi;
        h = conv2d(h, xi, L.stride, L.pad);
        break;
      }
      case LayerKind::FC: {
        Tensor xi = effective_weight(P.weight, L.weight);
        if (trace) trace->effective[i] = xi;
        if (h.rank() != 2) h = flatten(h);
        h = linear(h, xi);
        break;
      }
      case LayerKind::BN: h = batchnorm_forward(h, *P.bn, training); break;
      case LayerKind::ReLU:
        if (P.pact) {
          if (trace) {
            const double alpha = P.pact->alpha_value();
            const double a = static_cast<double>(quant_levels(P.pact->bits));
            for (double v : h.data()) {
              if (v <= 0.0 || v >= alpha) continue;
              const double t = a * (v / alpha);
              trace->min_tie_distance =
                  std::min(trace->min_tie_distance, std::abs(t - std::floor(t) - 0.5));
            }
          }
          h = pact_quantize(h, *P.pact);
        } else {
          h = relu(h);
        }
        break;
      case LayerKind::AvgPool: h = avg_pool2d(h, L.pool_kernel); break;
      case LayerKind::MaxPool: h = max_pool2d(h, L.pool_kernel); break;
    }

    for (const auto& s : graph_.skips)
      if (s.to == i) h = add(h, saved.at(s.from));
  }
  return h;
}

std::vector<NamedTensor> Model::tensors() {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
    const auto& L = graph_.layers[i];
    auto& P = params_[i];
    if (L.is_linear()) out.push_back({L.name + ".weight", ParamRole::Weight, i, P.weight});
    if (P.bn) {
      out.push_back({L.name + ".gamma", ParamRole::BnGamma, i, P.bn->gamma});
      out.push_back({L.name + ".beta", ParamRole::BnBeta, i, P.bn->beta});
      out.push_back({L.name + ".running_mean", ParamRole::BnMean, i, P.bn->running_mean});
      out.push_back({L.name + ".running_var", ParamRole::BnVar, i, P.bn->running_var});
    }
    if (P.pact) out.push_back({L.name + ".alpha", ParamRole::Alpha, i, P.pact->alpha});
  }
  return out;
}

std::vector<NamedTensor> Model::trainable() {
  std::vector<NamedTensor> out;
  for (auto& t : tensors()) {
    if (t.role != ParamRole::BnMean && t.role != ParamRole::BnVar) out.push_back(t);
  }
  return out;
}

void Model::round_to_storage() {
  for (auto& t : tensors())
    for (auto& v : t.tensor.data()) v = static_cast<double>(to_storage(v));
}

void Model::zero_grad() {
  for (auto& t : tensors()) t.tensor.zero_grad();
}

}  // namespace qsat
