// SPDX-License-Identifier: Apache-2.0
//
// Repeated-block networks (linear -> BN -> activation -> pool) with quantized
// layer wrappers and the desk-scale model presets.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qsat/quant.hpp"
#include "qsat/tensor.hpp"

namespace qsat {

enum class LayerKind { Conv, FC, BN, ReLU, AvgPool, MaxPool };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& text);

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  std::string name;

  // Conv / FC geometry. FC layers use kernel 1. BN uses out_channels.
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  QuantScheme weight;
  // Conv / FC: a BN layer consumes this layer's output directly.
  bool follows_bn = false;

  // AvgPool / MaxPool window (stride equals window).
  std::size_t pool_kernel = 1;

  // ReLU: PACT bit-width when activations are quantized.
  std::optional<int> act_bits;
  PactMode pact_mode = PactMode::Calibrated;

  bool is_linear() const { return kind == LayerKind::Conv || kind == LayerKind::FC; }
  // n_l = c_l * k^2
  std::size_t fan_in() const { return in_channels * kernel * kernel; }
  // n_hat_l = c_{l+1} * k^2
  std::size_t fan_out() const { return out_channels * kernel * kernel; }

  bool operator==(const LayerSpec&) const = default;
};

// The input of layer `from` is added to the output of layer `to`.
struct SkipConnection {
  std::size_t from = 0;
  std::size_t to = 0;
  bool operator==(const SkipConnection&) const = default;
};

struct ModelGraph {
  std::string preset;
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::size_t classes = 10;
  std::size_t width = 6;
  std::vector<LayerSpec> layers;
  std::vector<SkipConnection> skips;

  std::vector<std::size_t> linear_layers() const;
  // Pool kernel applied between linear layer `index` and the next linear
  // layer. Max pooling counts as 1.
  std::size_t pool_after(std::size_t index) const;
  // Pool kernel applied before the final FC layer.
  std::size_t pool_before_head() const;
  bool has_skips() const { return !skips.empty(); }
  // Linear layer indices whose (layer, next linear layer) pair straddles a
  // residual add.
  bool skip_adjacent(std::size_t linear_index) const;

  // Structural errors throw ShapeError. Rule violations that a run may
  // deliberately contain (for ablations) are returned as messages: no-BN
  // linear layers without rescale, first/last layers below 8 bits.
  std::vector<std::string> violations() const;

  bool operator==(const ModelGraph&) const = default;
};

// Quantization settings applied across a graph.
enum class RescalePolicy { Auto, None, LastOnly, All };

std::string to_string(RescalePolicy policy);
RescalePolicy parse_rescale_policy(const std::string& text);

struct QuantConfig {
  std::optional<int> weight_bits;  // nullopt: full precision
  std::optional<int> act_bits;     // nullopt: plain ReLU
  bool clamp = true;
  // Auto rescales every linear layer not followed by BN.
  RescalePolicy rescale = RescalePolicy::Auto;
  RescaleMode method = RescaleMode::Constant;
  // Bit-width floor for the first and last linear layers; nullopt applies the
  // internal bit-width uniformly.
  std::optional<int> first_last_bits = 8;
  PactMode pact_mode = PactMode::Calibrated;

  bool operator==(const QuantConfig&) const = default;
};

void apply_quant_config(ModelGraph& graph, const QuantConfig& cfg);

// Throws ShapeError on malformed graphs.
void check_structure(const ModelGraph& graph);

struct PresetOptions {
  std::size_t width = 6;
  std::size_t classes = 10;
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
};

// convnet-bn | convnet-nobn-tail | preresnet-toy. The returned graph uses the
// default QuantConfig (full precision, clamped, SAT on no-BN layers).
ModelGraph build_preset(const std::string& name, const PresetOptions& options = {});
std::vector<std::string> preset_names();

// ---------------------------------------------------------------------------
// Parameters and forward pass

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.1;

struct BatchNormState {
  Tensor gamma;  // trainable
  Tensor beta;   // trainable
  Tensor running_mean;
  Tensor running_var;
  double momentum = kBnMomentum;
  double epsilon = kBnEpsilon;

  explicit BatchNormState(std::size_t channels = 1);
};

// Training mode normalises with batch statistics (exact gradient through the
// batch mean and variance) and updates the running statistics; eval mode uses
// the running statistics. z is N x C or N x C x H x W.
Tensor batchnorm_forward(const Tensor& z, BatchNormState& state, bool training);

struct LayerParams {
  Tensor weight;  // Conv: c_out x c_in x k x k, FC: out x in
  std::optional<BatchNormState> bn;
  std::optional<PactState> pact;
};

// Filled by Model::forward when requested.
struct ForwardTrace {
  // Effective weight Xi per layer index (empty for non-linear layers). These
  // are tape nodes, so their gradients are readable after backward().
  std::vector<Tensor> effective;
  // Smallest distance of any pre-rounding PACT value a * x/alpha to a rounding
  // tie (k + 0.5). Used to exclude tie-adjacent inputs from exactness checks.
  double min_tie_distance = 1e300;
};

enum class ParamRole { Weight, Alpha, BnGamma, BnBeta, BnMean, BnVar };
std::string to_string(ParamRole role);
ParamRole parse_param_role(const std::string& text);

struct NamedTensor {
  std::string name;
  ParamRole role;
  std::size_t layer;
  Tensor tensor;
};

class Model {
 public:
  explicit Model(ModelGraph graph);

  // Deep copy; Model copies otherwise share parameter storage.
  Model clone() const;

  // Gaussian weights with variance 1/n_hat, gamma = 1, beta = 0, alpha = 8.
  // Parameters are stored at 32-bit precision.
  void init(std::uint64_t seed);

  Tensor forward(const Tensor& x, bool training, ForwardTrace* trace = nullptr);

  // Every stored tensor in a stable order: trainable ones and BN running
  // statistics.
  std::vector<NamedTensor> tensors();
  std::vector<NamedTensor> trainable();

  const ModelGraph& graph() const { return graph_; }
  // Replace quantization settings without touching parameters.
  void apply(const QuantConfig& cfg);

  LayerParams& params(std::size_t layer) { return params_.at(layer); }
  const LayerParams& params(std::size_t layer) const { return params_.at(layer); }

  // Rounds every stored value to the nearest 32-bit float.
  void round_to_storage();
  void zero_grad();

 private:
  void sync_pact();

  ModelGraph graph_;
  std::vector<LayerParams> params_;
};

float to_storage(double v);

}  // namespace qsat
