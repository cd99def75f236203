// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container and the BN-folding pass for integer inference.
//
// Container layout (all integers little-endian):
//
//   "QSAT"  u32 version  u64 manifest_bytes  manifest (JSON, UTF-8)
//   u64 payload_bytes  payload (f32 values of every tensor in manifest order)
//
// The manifest holds the graph, the tensor table (name, shape, role, scheme),
// the config hash, the container kind ("model" or "folded") and an FNV-1a
// checksum of the payload.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qsat/network.hpp"

namespace qsat {

inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json graph_to_json(const ModelGraph& g);
ModelGraph graph_from_json(const nlohmann::json& j);

struct TensorEntry {
  std::string name;
  std::string role;  // weight|alpha|bn_gamma|bn_beta|bn_mean|bn_var|int_weight|offset|clip|scale
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string kind = "model";  // model | folded
  std::string config_hash;
  ModelGraph graph;
  nlohmann::json extra;  // folded layer table for kind == folded
  std::vector<TensorEntry> tensors;

  const TensorEntry* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws FormatError on bad magic, unknown version, truncation, length or
// checksum disagreement.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

Checkpoint checkpoint_from_model(Model& model, const std::string& config_hash);
void save_checkpoint(Model& model, const std::string& path, const std::string& config_hash = "");

// Model with the checkpoint's own graph and values.
Model model_from_checkpoint(const Checkpoint& ckpt);
Model load_checkpoint(const std::string& path);

// Copies every tensor whose name and shape match into `model` (schemes stay
// as configured). Returns the names of model tensors absent from the file;
// shape mismatches throw FormatError.
std::vector<std::string> load_into(Model& model, const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// BN folding

enum class PoolKind { None, Avg, Max };

// A quantized linear layer followed by BN and PACT, with the following pool
// folded into the next layer's input scale. Integer inputs n carry the real
// value in_scale * n; for average pooling n is the window sum.
struct FoldedLayer {
  std::string name;
  std::size_t in_channels = 0, out_channels = 0, kernel = 1, stride = 1, pad = 0;
  std::int64_t weight_levels = 1;  // a_w
  std::int64_t act_levels = 1;     // a of the PACT after this layer
  double in_scale = 1.0;
  std::vector<std::int32_t> int_weight;  // 2m - a_w, sign-flipped for negative BN gain
  std::vector<double> offset;            // per channel, in accumulator units
  std::vector<double> clip;              // per channel, in accumulator units
  std::vector<double> multiplier;        // per channel: accumulator units -> output grid index
  PoolKind pool = PoolKind::None;
  std::size_t pool_kernel = 1;
};

struct FoldedHead {
  std::string name;
  std::size_t in_features = 0, out_features = 0;
  std::int64_t weight_levels = 1;
  std::vector<std::int32_t> int_weight;
  double logit_scale = 1.0;   // folded logits = logit_scale * accumulator
  double head_rescale = 1.0;  // dropped positive SAT factor: true logits = head_rescale * folded
};

struct FoldedModel {
  std::size_t in_channels = 0, image_size = 0, classes = 0;
  std::vector<FoldedLayer> layers;
  FoldedHead head;
};

// Requires a residual-free graph of [linear, BN, PACT, pools...] blocks with
// quantized weights, ending in a quantized FC head. Throws
// ApplicabilityError naming the offending layer or connection and
// DegenerateError for a zero BN gain.
FoldedModel fold_bn(const Model& model);
// Rejects containers that are already folded.
FoldedModel fold_bn(const Checkpoint& ckpt);

Checkpoint checkpoint_from_folded(const FoldedModel& fm, const ModelGraph& source, const std::string& config_hash);
FoldedModel folded_from_checkpoint(const Checkpoint& ckpt);

// Real-valued offsets and clips. Returns logits without head_rescale.
Tensor folded_forward(const FoldedModel& fm, const Tensor& x);
// Offsets and clips rounded to the nearest integer; int64 accumulators.
// Input values must be integers in [0, 255]. Throws OverflowError when a
// layer's worst-case accumulator exceeds the int64 range.
Tensor integer_forward(const FoldedModel& fm, const Tensor& x);

}  // namespace qsat
