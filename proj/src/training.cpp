// SPDX-License-Identifier: Apache-2.0
#include "qsat/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "qsat/ops.hpp"

namespace qsat {

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + v + "'");
}

// "fp" / "none" -> nullopt
std::optional<int> parse_bits(const std::string& key, const std::string& v) {
  if (v == "fp" || v == "none") return std::nullopt;
  const int b = parse_number<int>(key, v);
  if (b < 1 || b > 30) throw ConfigError("config key '" + key + "': bit-width must be in [1, 30]");
  return b;
}

std::string bits_text(const std::optional<int>& b) { return b ? std::to_string(*b) : "fp"; }

template <class F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::string real_text(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("config key 'epochs': must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("config key 'warmup_epochs': must satisfy 0 <= warmup_epochs < epochs");
  }
  if (!(base_lr > 0.0)) throw ConfigError("config key 'base_lr': must be positive");
  if (batch_size < 2) throw ConfigError("config key 'batch_size': must be >= 2");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("config key 'momentum': must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("config key 'weight_decay': must be >= 0");
  if (diag_every == 0) throw ConfigError("config key 'diag_every': must be >= 1");
  if (dataset != "synthetic" && dataset != "mnist" && dataset != "cifar10") {
    throw ConfigError("config key 'dataset': expected synthetic|mnist|cifar10, got '" + dataset + "'");
  }
  if (dataset == "synthetic") {
    if (classes < 2) throw ConfigError("config key 'classes': must be >= 2");
    if (train_size < batch_size) throw ConfigError("config key 'train_size': smaller than one batch");
    if (val_size == 0) throw ConfigError("config key 'val_size': must be >= 1");
  }
  if (quant.weight_bits && !quant.clamp) {
    throw ConfigError("config key 'clamp': quantized weights require clamp=true");
  }
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "': duplicated");

    if (key == "preset") c.preset = v;
    else if (key == "width") c.width = parse_number<std::size_t>(key, v);
    else if (key == "epochs") c.epochs = parse_number<int>(key, v);
    else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, v);
    else if (key == "base_lr") c.base_lr = parse_real(key, v);
    else if (key == "warmup_epochs") c.warmup_epochs = parse_number<int>(key, v);
    else if (key == "momentum") c.momentum = parse_real(key, v);
    else if (key == "weight_decay") c.weight_decay = parse_real(key, v);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "data_seed") c.data_seed = parse_number<std::uint64_t>(key, v);
    else if (key == "dataset") c.dataset = v;
    else if (key == "data_dir") c.data_dir = v;
    else if (key == "train_size") c.train_size = parse_number<std::size_t>(key, v);
    else if (key == "val_size") c.val_size = parse_number<std::size_t>(key, v);
    else if (key == "image_size") c.image_size = parse_number<std::size_t>(key, v);
    else if (key == "classes") c.classes = parse_number<std::size_t>(key, v);
    else if (key == "noise") c.noise = parse_real(key, v);
    else if (key == "flip") c.flip = v == "auto" ? std::nullopt : std::optional<bool>(parse_bool(key, v));
    else if (key == "weight_bits") c.quant.weight_bits = parse_bits(key, v);
    else if (key == "act_bits") c.quant.act_bits = parse_bits(key, v);
    else if (key == "clamp") c.quant.clamp = parse_bool(key, v);
    else if (key == "rescale") c.quant.rescale = wrap(key, [&] { return parse_rescale_policy(v); });
    else if (key == "rescale_method") {
      c.quant.method = wrap(key, [&] { return parse_rescale_mode(v); });
      if (c.quant.method == RescaleMode::None) throw ConfigError("config key 'rescale_method': use rescale=none");
    } else if (key == "first_last_bits") c.quant.first_last_bits = parse_bits(key, v);
    else if (key == "pact_mode") c.quant.pact_mode = wrap(key, [&] { return parse_pact_mode(v); });
    else if (key == "init") c.init = v;
    else if (key == "diag_every") c.diag_every = parse_number<std::size_t>(key, v);
    else if (key.rfind("layer.", 0) == 0) {
      const auto dot = key.rfind('.');
      const std::string name = key.substr(6, dot - 6);
      const std::string field = key.substr(dot + 1);
      if (name.empty() || dot <= 6) throw ConfigError("config key '" + key + "': expected layer.<name>.<field>");
      auto& o = c.overrides[name];
      if (field == "weight_bits") {
        o.weight_bits = parse_bits(key, v);
        o.weight_fp = !o.weight_bits;
      } else if (field == "rescale") {
        o.rescale = wrap(key, [&] { return parse_rescale_mode(v); });
      } else {
        throw ConfigError("config key '" + key + "': unknown layer field '" + field + "'");
      }
    } else {
      throw ConfigError("config key '" + key + "': unknown key");
    }
  }
  for (const char* req : {"preset", "epochs", "batch_size", "weight_bits", "act_bits"}) {
    if (!seen.count(req)) throw ConfigError(std::string("config key '") + req + "': missing");
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const TrainConfig& c) {
  std::map<std::string, std::string> kv;
  kv["preset"] = c.preset;
  kv["width"] = std::to_string(c.width);
  kv["epochs"] = std::to_string(c.epochs);
  kv["batch_size"] = std::to_string(c.batch_size);
  kv["base_lr"] = real_text(c.base_lr);
  kv["warmup_epochs"] = std::to_string(c.warmup_epochs);
  kv["momentum"] = real_text(c.momentum);
  kv["weight_decay"] = real_text(c.weight_decay);
  kv["seed"] = std::to_string(c.seed);
  kv["data_seed"] = std::to_string(c.data_seed);
  kv["dataset"] = c.dataset;
  if (!c.data_dir.empty()) kv["data_dir"] = c.data_dir;
  kv["train_size"] = std::to_string(c.train_size);
  kv["val_size"] = std::to_string(c.val_size);
  kv["image_size"] = std::to_string(c.image_size);
  kv["classes"] = std::to_string(c.classes);
  kv["noise"] = real_text(c.noise);
  kv["flip"] = c.flip ? (*c.flip ? "true" : "false") : "auto";
  kv["weight_bits"] = bits_text(c.quant.weight_bits);
  kv["act_bits"] = bits_text(c.quant.act_bits);
  kv["clamp"] = c.quant.clamp ? "true" : "false";
  kv["rescale"] = to_string(c.quant.rescale);
  kv["rescale_method"] = to_string(c.quant.method);
  kv["first_last_bits"] = bits_text(c.quant.first_last_bits);
  kv["pact_mode"] = to_string(c.quant.pact_mode);
  if (!c.init.empty()) kv["init"] = c.init;
  kv["diag_every"] = std::to_string(c.diag_every);
  for (const auto& [name, o] : c.overrides) {
    if (o.weight_bits || o.weight_fp) kv["layer." + name + ".weight_bits"] = bits_text(o.weight_bits);
    if (o.rescale) kv["layer." + name + ".rescale"] = to_string(*o.rescale);
  }
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string config_hash(const TrainConfig& c) {
  TrainConfig canon = c;
  canon.init.clear();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_text(canon)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ModelGraph build_graph(const TrainConfig& cfg) {
  PresetOptions o;
  o.width = cfg.width;
  if (cfg.dataset == "mnist") {
    o.in_channels = 1;
    o.image_size = 28;
    o.classes = 10;
  } else if (cfg.dataset == "cifar10") {
    o.in_channels = 3;
    o.image_size = 32;
    o.classes = 10;
  } else {
    o.in_channels = 3;
    o.image_size = cfg.image_size;
    o.classes = cfg.classes;
  }
  ModelGraph g = wrap("preset", [&] { return build_preset(cfg.preset, o); });
  apply_quant_config(g, cfg.quant);
  for (const auto& [name, ov] : cfg.overrides) {
    auto it = std::find_if(g.layers.begin(), g.layers.end(), [&](const LayerSpec& L) { return L.name == name; });
    if (it == g.layers.end() || !it->is_linear()) {
      throw ConfigError("config key 'layer." + name + "': no linear layer of that name");
    }
    if (ov.weight_bits || ov.weight_fp) {
      it->weight.bits = ov.weight_bits;
      if (ov.weight_bits) it->weight.clamp = true;
    }
    if (ov.rescale) it->weight.rescale = *ov.rescale;
    wrap("layer." + name, [&] {
      it->weight.validate();
      return 0;
    });
  }
  return g;
}

Model make_model(const TrainConfig& cfg) {
  Model m(build_graph(cfg));
  m.init(cfg.seed);
  return m;
}

// ---------------------------------------------------------------------------
// Data

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.image_size < 4 || spec.channels == 0) {
    throw DatasetError("synthetic dataset: invalid geometry");
  }
  const std::size_t S = spec.image_size, C = spec.channels;
  const double scale = static_cast<double>(S) / 32.0;

  // Prototypes depend on geometry only.
  std::mt19937_64 proto_rng(0x9e3779b97f4a7c15ULL ^ (spec.classes * 1315423911ULL) ^ (S << 20) ^ (C << 40));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<double> protos(spec.classes * C * S * S, 128.0);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (int j = 0; j < 4; ++j) {
      const double cx = (0.2 + 0.6 * U(proto_rng)) * S, cy = (0.2 + 0.6 * U(proto_rng)) * S;
      const double sig = (2.0 + 4.0 * U(proto_rng)) * scale;
      std::vector<double> amp(C);
      for (auto& a : amp) a = -90.0 + 180.0 * U(proto_rng);
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t y = 0; y < S; ++y)
          for (std::size_t x = 0; x < S; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            protos[((k * C + ch) * S + y) * S + x] += amp[ch] * std::exp(-d2 / (2.0 * sig * sig));
          }
    }
  }

  Dataset d;
  d.channels = C;
  d.height = d.width = S;
  d.classes = spec.classes;
  d.pixels.resize(spec.count * C * S * S);
  d.labels.resize(spec.count);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise);
  const int max_shift = static_cast<int>(std::lround(3.0 * scale));
  std::uniform_int_distribution<int> shift(-max_shift, max_shift);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t k = i % spec.classes;
    d.labels[i] = static_cast<int>(k);
    const int dx = shift(rng), dy = shift(rng);
    const double contrast = 0.7 + 0.6 * U(rng);
    const double offset = -20.0 + 40.0 * U(rng);
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const auto sy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + dy, 0, S - 1));
          const auto sx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + dx, 0, S - 1));
          const double p = protos[((k * C + ch) * S + sy) * S + sx];
          const double v = 128.0 + contrast * (p - 128.0) + offset + noise(rng);
          d.pixels[((i * C + ch) * S + y) * S + x] =
              static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
  }
  return d;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DatasetError("dataset file not found: " + p.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  if (off + 4 > b.size()) throw DatasetError("truncated IDX header");
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

}  // namespace

Dataset load_mnist(const std::string& dir, bool train) {
  const std::filesystem::path root(dir);
  const std::string prefix = train ? "train" : "t10k";
  auto images = read_file(root / (prefix + "-images-idx3-ubyte"));
  auto labels = read_file(root / (prefix + "-labels-idx1-ubyte"));
  if (be32(images, 0) != 0x00000803 || be32(labels, 0) != 0x00000801) throw DatasetError("bad IDX magic");
  const std::size_t n = be32(images, 4), h = be32(images, 8), w = be32(images, 12);
  if (be32(labels, 4) != n) throw DatasetError("IDX image/label counts differ");
  if (images.size() != 16 + n * h * w || labels.size() != 8 + n) throw DatasetError("IDX payload size mismatch");
  Dataset d;
  d.channels = 1;
  d.height = h;
  d.width = w;
  d.classes = 10;
  d.pixels.assign(images.begin() + 16, images.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[8 + i] > 9) throw DatasetError("IDX label out of range");
    d.labels.push_back(labels[8 + i]);
  }
  if (d.size() == 0) throw DatasetError("empty dataset in " + dir);
  return d;
}

Dataset load_cifar10(const std::string& dir, bool train) {
  const std::filesystem::path root(dir);
  std::vector<std::string> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back("test_batch.bin");
  }
  Dataset d;
  d.channels = 3;
  d.height = d.width = 32;
  d.classes = 10;
  constexpr std::size_t rec = 1 + 3 * 32 * 32;
  for (const auto& f : files) {
    auto bytes = read_file(root / f);
    if (bytes.size() % rec != 0) throw DatasetError("CIFAR-10 batch " + f + " has a partial record");
    for (std::size_t off = 0; off < bytes.size(); off += rec) {
      if (bytes[off] > 9) throw DatasetError("CIFAR-10 label out of range");
      d.labels.push_back(bytes[off]);
      d.pixels.insert(d.pixels.end(), bytes.begin() + off + 1, bytes.begin() + off + rec);
    }
  }
  if (d.size() == 0) throw DatasetError("empty dataset in " + dir);
  return d;
}

DataSplits load_data(const TrainConfig& cfg) {
  if (cfg.dataset == "mnist" || cfg.dataset == "cifar10") {
    if (cfg.data_dir.empty()) throw DatasetError("dataset '" + cfg.dataset + "' needs data_dir or --dataset");
    if (!std::filesystem::is_directory(cfg.data_dir)) throw DatasetError("dataset directory not found: " + cfg.data_dir);
    const bool mnist = cfg.dataset == "mnist";
    return {mnist ? load_mnist(cfg.data_dir, true) : load_cifar10(cfg.data_dir, true),
            mnist ? load_mnist(cfg.data_dir, false) : load_cifar10(cfg.data_dir, false)};
  }
  SyntheticSpec s;
  s.classes = cfg.classes;
  s.image_size = cfg.image_size;
  s.noise = cfg.noise;
  s.count = cfg.train_size;
  s.seed = cfg.data_seed * 2 + 1;
  Dataset train = make_synthetic(s);
  s.count = cfg.val_size;
  s.seed = cfg.data_seed * 2 + 2;
  return {std::move(train), make_synthetic(s)};
}

Tensor batch_images(const Dataset& d, std::span<const std::size_t> idx, std::span<const std::uint8_t> flip) {
  const std::size_t C = d.channels, H = d.height, W = d.width, E = d.image_elems();
  Tensor x({idx.size(), C, H, W});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= d.size()) throw DatasetError("sample index out of range");
    const std::uint8_t* src = d.pixels.data() + idx[b] * E;
    double* dst = x.data().data() + b * E;
    const bool f = !flip.empty() && flip[b] != 0;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          dst[(c * H + y) * W + xx] = src[(c * H + y) * W + (f ? W - 1 - xx : xx)];
        }
  }
  return x;
}

std::vector<int> batch_labels(const Dataset& d, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(d.labels.at(i));
  return out;
}

// ---------------------------------------------------------------------------
// Loss, optimizer, schedule

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be N x K");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw ShapeError("cross_entropy: need at least 2 classes");
  if (labels.size() != n) throw ShapeError("cross_entropy: label count differs from batch");
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  Tensor probs({n, k});
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw DomainError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                        std::to_string(k) + ")");
    }
    double mx = logits[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[i * k + j] - mx);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(logits[i * k + j] - mx - lz);
    loss += -(logits[i * k + labels[i]] - mx - lz);
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(n));
  return record("cross_entropy", out, {logits}, [probs, labels, n, k](const Tensor& g) {
    Tensor gl({n, k});
    const double s = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        gl[i * k + j] = s * (probs[i * k + j] - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0));
      }
    return std::vector<Tensor>{gl};
  });
}

void sgd_step(std::span<double> w, std::span<const double> g, std::vector<double>& v, double lr, double momentum,
              double weight_decay) {
  if (!g.empty() && g.size() != w.size()) throw ShapeError("sgd_step: gradient size mismatch");
  if (v.size() != w.size()) v.assign(w.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = (g.empty() ? 0.0 : g[i]) + weight_decay * w[i];
    v[i] = momentum * v[i] + d;
    w[i] -= lr * (d + momentum * v[i]);
  }
}

void Optimizer::step(Model& model, double lr) {
  for (auto& t : model.trainable()) {
    const bool decay = t.role == ParamRole::Weight || t.role == ParamRole::Alpha;
    std::span<const double> g;
    if (t.tensor.has_grad()) g = t.tensor.grad_data();
    sgd_step(t.tensor.data(), g, velocity_[t.name], lr, momentum_, decay ? weight_decay_ : 0.0);
  }
  for (std::size_t i = 0; i < model.graph().layers.size(); ++i) {
    auto& P = model.params(i);
    if (P.pact) P.pact->enforce_positive();
  }
  model.round_to_storage();
}

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak) {
  if (total_steps == 0 || step >= total_steps) throw DomainError("lr_schedule: step outside [0, total)");
  if (warmup_steps >= total_steps) throw DomainError("lr_schedule: warmup must be shorter than the run");
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Loop

namespace {

// Rank of the true logit; ties go to the lower class index, as in predict().
std::size_t true_rank(const Tensor& logits, std::size_t i, std::size_t k, int label) {
  const auto y = static_cast<std::size_t>(label);
  const double t = logits[i * k + y];
  std::size_t r = 0;
  for (std::size_t j = 0; j < k; ++j) {
    const double v = logits[i * k + j];
    if (v > t || (v == t && j < y)) ++r;
  }
  return r;
}

}  // namespace

EvalResult evaluate(Model& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw DatasetError("evaluate: empty dataset");
  NoGradGuard guard;
  EvalResult r;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    Tensor logits = model.forward(batch_images(data, idx), false);
    const auto labels = batch_labels(data, idx);
    const std::size_t k = logits.dim(1);
    r.loss += cross_entropy(logits, labels).item() * static_cast<double>(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto rank = true_rank(logits, i, k, labels[i]);
      if (rank == 0) r.top1 += 1.0;
      if (rank < 5) r.top5 += 1.0;
    }
  }
  const double n = static_cast<double>(data.size());
  r.top1 /= n;
  r.top5 /= n;
  r.loss /= n;
  return r;
}

std::vector<int> predict(Model& model, const Dataset& data, std::size_t batch_size) {
  NoGradGuard guard;
  std::vector<int> out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    Tensor logits = model.forward(batch_images(data, idx), false);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (logits[i * k + j] > logits[i * k + best]) best = j;
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

void write_metrics_row(std::ostream& out, const EpochMetrics& m) {
  out << m.epoch << ',' << m.split << ',' << format_real(m.top1) << ',' << format_real(m.top5) << ','
      << format_real(m.loss) << ',' << format_real(m.lr) << '\n';
}

BatchSampler::BatchSampler(std::uint64_t seed, std::size_t n, bool flip)
    : rng_(seed * 0x2545F4914F6CDD1DULL + 0x632BE59BD9B4E019ULL), order_(n), flips_(n), flip_(flip) {}

void BatchSampler::next_epoch() {
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
  for (auto& f : flips_) f = flip_ && (rng_() & 1U) ? 1 : 0;
}

TrainResult train(Model& model, const TrainConfig& cfg, const Dataset& train_set, const Dataset& val,
                  const TrainSinks& sinks) {
  cfg.validate();
  if (train_set.size() < cfg.batch_size) throw DatasetError("training set smaller than one batch");
  const std::size_t spe = train_set.size() / cfg.batch_size;
  const std::size_t total = spe * static_cast<std::size_t>(cfg.epochs);
  const std::size_t warmup = spe * static_cast<std::size_t>(cfg.warmup_epochs);
  const bool flip = cfg.flip.value_or(train_set.height == 32);

  BatchSampler sampler(cfg.seed, train_set.size(), flip);
  Optimizer opt(cfg.momentum, cfg.weight_decay);
  TrainResult result;
  std::size_t step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    sampler.next_epoch();
    const auto& perm = sampler.order();
    const auto& flips = sampler.flips();

    EpochMetrics tm{epoch, "train"};
    double seen = 0.0, lr = 0.0;
    for (std::size_t b = 0; b < spe; ++b, ++step) {
      std::span<const std::size_t> idx(perm.data() + b * cfg.batch_size, cfg.batch_size);
      Tensor x = batch_images(train_set, idx, std::span<const std::uint8_t>(flips.data() + b * cfg.batch_size,
                                                                          cfg.batch_size));
      const auto labels = batch_labels(train_set, idx);

      lr = lr_schedule(step, total, warmup, cfg.peak_lr());
      const bool log = (step % cfg.diag_every == 0) || b == 0 || b + 1 == spe;
      model.zero_grad();
      ForwardTrace trace;
      Tensor logits = model.forward(x, true, log ? &trace : nullptr);
      Tensor loss = cross_entropy(logits, labels);
      if (!std::isfinite(loss.item())) {
        clear_tape();
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step));
      }
      backward(loss);
      if (log) {
        auto recs = collect_records(model, trace, static_cast<std::int64_t>(step), lr);
        if (sinks.diagnostics)
          for (const auto& r : recs) write_csv_row(*sinks.diagnostics, r);
        if (sinks.keep_records) result.records.insert(result.records.end(), recs.begin(), recs.end());
      }
      opt.step(model, lr);

      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto rank = true_rank(logits, i, k, labels[i]);
        if (rank == 0) tm.top1 += 1.0;
        if (rank < 5) tm.top5 += 1.0;
      }
      tm.loss += loss.item() * static_cast<double>(labels.size());
      seen += static_cast<double>(labels.size());
    }
    tm.top1 /= seen;
    tm.top5 /= seen;
    tm.loss /= seen;
    tm.lr = lr;
    const EvalResult ev = evaluate(model, val);
    EpochMetrics vm{epoch, "val", ev.top1, ev.top5, ev.loss, lr};
    result.metrics.push_back(tm);
    result.metrics.push_back(vm);
    result.final_val = ev;
    if (sinks.metrics) {
      write_metrics_row(*sinks.metrics, tm);
      write_metrics_row(*sinks.metrics, vm);
    }
    if (sinks.on_epoch_end) sinks.on_epoch_end(model, epoch);
  }
  return result;
}

}  // namespace qsat
