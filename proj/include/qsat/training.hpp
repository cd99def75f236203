// SPDX-License-Identifier: Apache-2.0
//
// Training recipe: cross-entropy, Nesterov SGD, warmup + cosine schedule,
// datasets and the epoch loop.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qsat/diagnostics.hpp"
#include "qsat/network.hpp"

namespace qsat {

// ---------------------------------------------------------------------------
// Configuration

struct LayerOverride {
  std::optional<int> weight_bits;  // set when the key is present
  bool weight_fp = false;          // "fp" forces full precision
  std::optional<RescaleMode> rescale;
  bool operator==(const LayerOverride&) const = default;
};

struct TrainConfig {
  std::string preset = "convnet-bn";
  std::size_t width = 6;
  int epochs = 10;
  std::size_t batch_size = 32;
  double base_lr = 0.05;  // peak lr = base_lr * batch_size / 256
  int warmup_epochs = 0;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  std::uint64_t seed = 1;

  // synthetic | mnist | cifar10
  std::string dataset = "synthetic";
  std::string data_dir;
  std::size_t train_size = 2000;  // synthetic only
  std::size_t val_size = 1000;    // synthetic only
  std::size_t image_size = 32;    // synthetic only
  std::size_t classes = 10;       // synthetic only
  double noise = 48.0;            // synthetic only
  std::optional<bool> flip;       // default: on for 32x32 inputs

  QuantConfig quant;
  std::map<std::string, LayerOverride> overrides;
  std::string init;  // FP checkpoint for finetuning

  std::size_t diag_every = 50;
  std::uint64_t data_seed = 7;  // synthetic sample draw, independent of seed

  bool operator==(const TrainConfig&) const = default;

  void validate() const;
  bool quantized() const { return quant.weight_bits.has_value() || quant.act_bits.has_value(); }
  double peak_lr() const { return base_lr * static_cast<double>(batch_size) / 256.0; }
};

// Flat key=value text. '#' starts a comment. Unknown keys, malformed values
// and missing required keys (preset, epochs, batch_size, weight_bits,
// act_bits) raise ConfigError naming the key.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);
// Canonical key=value text (sorted keys); parse_config(to_text(c)) == c.
std::string to_text(const TrainConfig& cfg);
// FNV-1a of the canonical text of the model-defining keys, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

ModelGraph build_graph(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Data

struct Dataset {
  std::size_t channels = 0, height = 0, width = 0, classes = 0;
  std::vector<std::uint8_t> pixels;  // N x C x H x W
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_elems() const { return channels * height * width; }
};

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t count = 1000;
  double noise = 48.0;
  std::uint64_t seed = 1;
};

// Deterministic class-conditional images: each class is a smooth random
// prototype; samples are shifted, contrast-jittered, noisy copies quantized
// to 0..255. The prototype set depends only on (classes, image_size,
// channels); `seed` drives the per-sample variation.
Dataset make_synthetic(const SyntheticSpec& spec);

// IDX files (train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-...).
Dataset load_mnist(const std::string& dir, bool train);
// CIFAR-10 binary batches (data_batch_1..5.bin, test_batch.bin).
Dataset load_cifar10(const std::string& dir, bool train);

struct DataSplits {
  Dataset train;
  Dataset val;
};
DataSplits load_data(const TrainConfig& cfg);

// Images as reals in [0, 255], no standardization.
Tensor batch_images(const Dataset& d, std::span<const std::size_t> idx, std::span<const std::uint8_t> flip = {});
std::vector<int> batch_labels(const Dataset& d, std::span<const std::size_t> idx);

// ---------------------------------------------------------------------------
// Loss, optimizer, schedule

// Mean softmax cross-entropy with max-subtraction. Throws DomainError for
// labels outside [0, K).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// v <- mu v + (g + lambda w); w <- w - lr (g + lambda w + mu v)
void sgd_step(std::span<double> w, std::span<const double> g, std::vector<double>& velocity, double lr,
              double momentum, double weight_decay);

class Optimizer {
 public:
  Optimizer(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  // Weight decay applies to latent weights and PACT levels only. Afterwards
  // alpha is floored and every value is rounded to 32-bit storage.
  void step(Model& model, double lr);

 private:
  double momentum_, weight_decay_;
  std::map<std::string, std::vector<double>> velocity_;
};

// Linear warmup from 0 to peak over warmup_steps, then cosine to 0.
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak);

// ---------------------------------------------------------------------------
// Loop

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  double loss = 0.0;
};

EvalResult evaluate(Model& model, const Dataset& data, std::size_t batch_size = 100);
// Top-1 predictions in eval mode.
std::vector<int> predict(Model& model, const Dataset& data, std::size_t batch_size = 100);

struct EpochMetrics {
  int epoch = 0;
  std::string split;
  double top1 = 0.0, top5 = 0.0, loss = 0.0, lr = 0.0;
};

inline const char* kMetricsCsvHeader = "epoch,split,top1,top5,loss,lr";
void write_metrics_row(std::ostream& out, const EpochMetrics& m);

// Per-epoch shuffle and flip bits. Depends only on (seed, n, flip).
class BatchSampler {
 public:
  BatchSampler(std::uint64_t seed, std::size_t n, bool flip);
  void next_epoch();
  const std::vector<std::size_t>& order() const { return order_; }
  const std::vector<std::uint8_t>& flips() const { return flips_; }

 private:
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::vector<std::uint8_t> flips_;
  bool flip_;
};

struct TrainSinks {
  std::ostream* metrics = nullptr;      // rows only; header written by caller
  std::ostream* diagnostics = nullptr;  // rows only
  std::function<void(const Model&, int epoch)> on_epoch_end;
  bool keep_records = false;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  std::vector<DiagnosticsRecord> records;  // filled when keep_records
  EvalResult final_val;
};

// Runs cfg.epochs epochs on `model` as configured (the model's quantization
// settings are left as they are). Batch order and flips depend only on
// cfg.seed. Throws DivergenceError on a non-finite loss.
TrainResult train(Model& model, const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                  const TrainSinks& sinks = {});

// Fresh model for cfg: preset graph with quantization applied, initialised
// from cfg.seed.
Model make_model(const TrainConfig& cfg);

}  // namespace qsat
