// SPDX-License-Identifier: Apache-2.0
#include "qsat/deployment.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "qsat/ops.hpp"

namespace qsat {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

// ---------------------------------------------------------------------------
// Graph serialization

namespace {

json scheme_to_json(const QuantScheme& s) {
  return {{"bits", s.bits ? json(*s.bits) : json(nullptr)},
          {"rescale", to_string(s.rescale)},
          {"fan_out", s.fan_out},
          {"clamp", s.clamp}};
}

QuantScheme scheme_from_json(const json& j) {
  QuantScheme s;
  if (!j.at("bits").is_null()) s.bits = j.at("bits").get<int>();
  s.rescale = parse_rescale_mode(j.at("rescale").get<std::string>());
  s.fan_out = j.at("fan_out").get<std::size_t>();
  s.clamp = j.at("clamp").get<bool>();
  return s;
}

}  // namespace

json graph_to_json(const ModelGraph& g) {
  json layers = json::array();
  for (const auto& L : g.layers) {
    layers.push_back({{"kind", to_string(L.kind)},
                      {"name", L.name},
                      {"in_channels", L.in_channels},
                      {"out_channels", L.out_channels},
                      {"kernel", L.kernel},
                      {"stride", L.stride},
                      {"pad", L.pad},
                      {"weight", scheme_to_json(L.weight)},
                      {"follows_bn", L.follows_bn},
                      {"pool_kernel", L.pool_kernel},
                      {"act_bits", L.act_bits ? json(*L.act_bits) : json(nullptr)},
                      {"pact_mode", to_string(L.pact_mode)}});
  }
  json skips = json::array();
  for (const auto& s : g.skips) skips.push_back({s.from, s.to});
  return {{"preset", g.preset},         {"in_channels", g.in_channels}, {"image_size", g.image_size},
          {"classes", g.classes},       {"width", g.width},             {"layers", layers},
          {"skips", skips}};
}

ModelGraph graph_from_json(const json& j) {
  try {
    ModelGraph g;
    g.preset = j.at("preset").get<std::string>();
    g.in_channels = j.at("in_channels").get<std::size_t>();
    g.image_size = j.at("image_size").get<std::size_t>();
    g.classes = j.at("classes").get<std::size_t>();
    g.width = j.at("width").get<std::size_t>();
    for (const auto& l : j.at("layers")) {
      LayerSpec L;
      L.kind = parse_layer_kind(l.at("kind").get<std::string>());
      L.name = l.at("name").get<std::string>();
      L.in_channels = l.at("in_channels").get<std::size_t>();
      L.out_channels = l.at("out_channels").get<std::size_t>();
      L.kernel = l.at("kernel").get<std::size_t>();
      L.stride = l.at("stride").get<std::size_t>();
      L.pad = l.at("pad").get<std::size_t>();
      L.weight = scheme_from_json(l.at("weight"));
      L.follows_bn = l.at("follows_bn").get<bool>();
      L.pool_kernel = l.at("pool_kernel").get<std::size_t>();
      if (!l.at("act_bits").is_null()) L.act_bits = l.at("act_bits").get<int>();
      L.pact_mode = parse_pact_mode(l.at("pact_mode").get<std::string>());
      g.layers.push_back(L);
    }
    for (const auto& s : j.at("skips")) g.skips.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    check_structure(g);
    return g;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed graph in manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid graph in manifest: ") + e.what());
  } catch (const std::domain_error& e) {
    throw FormatError(std::string("invalid graph in manifest: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Container

const TensorEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

namespace {

constexpr char kMagic[4] = {'Q', 'S', 'A', 'T'};

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(const std::vector<std::uint8_t>& in, std::size_t& off) {
  if (off + sizeof(T) > in.size()) throw FormatError("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

const QuantScheme* scheme_for(const ModelGraph& g, const std::string& tensor_name) {
  for (const auto& L : g.layers)
    if (L.is_linear() && tensor_name == L.name + ".weight") return &L.weight;
  return nullptr;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  std::vector<std::uint8_t> payload;
  json tensors = json::array();
  for (const auto& t : c.tensors) {
    if (t.values.size() != shape_numel(t.shape)) {
      throw FormatError("tensor " + t.name + ": " + std::to_string(t.values.size()) + " values for shape " +
                        shape_str(t.shape));
    }
    json e = {{"name", t.name}, {"role", t.role}, {"shape", t.shape}};
    if (const auto* s = scheme_for(c.graph, t.name); s && t.role == "weight") e["scheme"] = scheme_to_json(*s);
    tensors.push_back(e);
    for (float v : t.values) put(payload, v);
  }
  json manifest = {{"kind", c.kind},
                   {"config_hash", c.config_hash},
                   {"graph", graph_to_json(c.graph)},
                   {"tensors", tensors},
                   {"payload_fnv1a", hex64(fnv1a(payload.data(), payload.size()))}};
  if (!c.extra.is_null()) manifest["folded"] = c.extra;
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  put(out, static_cast<std::uint64_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a QSAT checkpoint (bad magic)");
  std::size_t off = 4;
  const auto version = get<std::uint32_t>(bytes, off);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto mlen = get<std::uint64_t>(bytes, off);
  if (mlen > bytes.size() - off) throw FormatError("checkpoint truncated in manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                           bytes.begin() + static_cast<std::ptrdiff_t>(off + mlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  off += mlen;
  const auto plen = get<std::uint64_t>(bytes, off);
  if (plen != bytes.size() - off) {
    throw FormatError("payload length " + std::to_string(plen) + " disagrees with " +
                      std::to_string(bytes.size() - off) + " bytes present");
  }
  const std::uint8_t* payload = bytes.data() + off;

  Checkpoint c;
  try {
    c.kind = manifest.at("kind").get<std::string>();
    c.config_hash = manifest.at("config_hash").get<std::string>();
    if (manifest.contains("folded")) c.extra = manifest.at("folded");
    std::size_t expected = 0;
    for (const auto& e : manifest.at("tensors")) {
      TensorEntry t;
      t.name = e.at("name").get<std::string>();
      t.role = e.at("role").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      expected += 4 * shape_numel(t.shape);
      c.tensors.push_back(std::move(t));
    }
    if (expected != plen) {
      throw FormatError("manifest describes " + std::to_string(expected) + " payload bytes, file has " +
                        std::to_string(plen));
    }
    if (manifest.at("payload_fnv1a").get<std::string>() != hex64(fnv1a(payload, plen))) {
      throw FormatError("payload checksum mismatch");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  c.graph = graph_from_json(manifest.at("graph"));
  std::size_t p = 0;
  for (auto& t : c.tensors) {
    t.values.resize(shape_numel(t.shape));
    std::memcpy(t.values.data(), payload + p, 4 * t.values.size());
    p += 4 * t.values.size();
  }
  return c;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write checkpoint " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), {});
  return decode_checkpoint(bytes);
}

Checkpoint checkpoint_from_model(Model& model, const std::string& config_hash) {
  Checkpoint c;
  c.kind = "model";
  c.config_hash = config_hash;
  c.graph = model.graph();
  for (const auto& t : model.tensors()) {
    TensorEntry e;
    e.name = t.name;
    e.role = to_string(t.role);
    e.shape = t.tensor.shape();
    for (double v : t.tensor.data()) e.values.push_back(to_storage(v));
    c.tensors.push_back(std::move(e));
  }
  return c;
}

void save_checkpoint(Model& model, const std::string& path, const std::string& config_hash) {
  write_checkpoint(checkpoint_from_model(model, config_hash), path);
}

std::vector<std::string> load_into(Model& model, const Checkpoint& ckpt) {
  if (ckpt.kind != "model") throw FormatError("checkpoint kind '" + ckpt.kind + "' cannot initialise a model");
  std::vector<std::string> missing;
  for (auto& t : model.tensors()) {
    const TensorEntry* e = ckpt.find(t.name);
    if (!e) {
      missing.push_back(t.name);
      continue;
    }
    if (e->shape != t.tensor.shape()) {
      throw FormatError("tensor " + t.name + " has shape " + shape_str(e->shape) + " in file, model expects " +
                        shape_str(t.tensor.shape()));
    }
    auto d = t.tensor.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(e->values[i]);
  }
  return missing;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m(ckpt.graph);
  const auto missing = load_into(m, ckpt);
  if (!missing.empty()) throw FormatError("checkpoint lacks tensor " + missing.front());
  return m;
}

Model load_checkpoint(const std::string& path) { return model_from_checkpoint(read_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Folding

namespace {

struct QuantizedWeight {
  std::vector<std::int32_t> ints;  // 2m - a_w
  std::int64_t levels = 1;
  double rescale = 1.0;
};

QuantizedWeight quantize_for_folding(const Tensor& w, const LayerSpec& L) {
  if (!L.weight.bits) throw ApplicabilityError("layer " + L.name + ": weights are not quantized");
  NoGradGuard guard;
  QuantizedWeight q;
  q.levels = quant_levels(*L.weight.bits);
  Tensor Q = quantize_weight(dorefa_clamp(w), *L.weight.bits);
  for (double v : Q.data()) q.ints.push_back(static_cast<std::int32_t>(std::llround(v * static_cast<double>(q.levels))));
  switch (L.weight.rescale) {
    case RescaleMode::None: q.rescale = 1.0; break;
    case RescaleMode::Constant: q.rescale = constant_rescale_factor(Q.data(), L.weight.fan_out); break;
    case RescaleMode::Stddev:
      q.rescale = std::sqrt(mean_square_value(w.data()) / mean_square_value(Q.data()));
      break;
  }
  return q;
}

}  // namespace

FoldedModel fold_bn(const Model& model) {
  const auto& g = model.graph();
  for (const auto& s : g.skips) {
    throw ApplicabilityError("residual connection from " + g.layers[s.from].name + " to " + g.layers[s.to].name +
                             " cannot be folded");
  }
  FoldedModel fm;
  fm.in_channels = g.in_channels;
  fm.image_size = g.image_size;
  fm.classes = g.classes;

  const auto lin = g.linear_layers();
  if (lin.empty() || lin.front() != 0) {
    throw ApplicabilityError("layer " + g.layers.front().name + ": folding needs a linear first layer");
  }
  double in_scale = 1.0;
  for (std::size_t idx = 0; idx + 1 < lin.size(); ++idx) {
    const std::size_t i = lin[idx];
    const auto& L = g.layers[i];
    if (L.kind != LayerKind::Conv) throw ApplicabilityError("layer " + L.name + ": only convolutions fold");
    if (i + 2 >= g.layers.size() || g.layers[i + 1].kind != LayerKind::BN) {
      throw ApplicabilityError("layer " + L.name + ": not followed by batch norm");
    }
    const auto& act = g.layers[i + 2];
    const auto& pact = model.params(i + 2).pact;
    if (act.kind != LayerKind::ReLU || !pact) {
      throw ApplicabilityError("layer " + L.name + ": batch norm is not followed by a quantized PACT activation");
    }
    FoldedLayer F;
    F.name = L.name;
    F.in_channels = L.in_channels;
    F.out_channels = L.out_channels;
    F.kernel = L.kernel;
    F.stride = L.stride;
    F.pad = L.pad;
    F.in_scale = in_scale;
    const QuantizedWeight q = quantize_for_folding(model.params(i).weight, L);
    F.weight_levels = q.levels;
    F.int_weight = q.ints;
    F.act_levels = quant_levels(pact->bits);
    const double alpha = pact->alpha_value();
    const double a = static_cast<double>(F.act_levels);

    const auto& bn = *model.params(i + 1).bn;
    const double S = q.rescale * in_scale / static_cast<double>(q.levels);
    const std::size_t per_out = F.int_weight.size() / F.out_channels;
    for (std::size_t c = 0; c < F.out_channels; ++c) {
      const double gain = bn.gamma[c] / std::sqrt(bn.running_var[c] + bn.epsilon);
      const double shift = bn.beta[c] - gain * bn.running_mean[c];
      double gs = gain * S;
      if (gs == 0.0) {
        throw DegenerateError("layer " + L.name + " channel " + std::to_string(c) + ": zero batch-norm gain");
      }
      if (gs < 0.0) {
        for (std::size_t j = 0; j < per_out; ++j) F.int_weight[c * per_out + j] = -F.int_weight[c * per_out + j];
        gs = -gs;
      }
      F.offset.push_back(shift / gs);
      F.clip.push_back(alpha / gs);
      F.multiplier.push_back(a / alpha * gs);
    }

    std::size_t k = 1;
    for (std::size_t j = i + 3; j < lin[idx + 1]; ++j) {
      const auto& P = g.layers[j];
      const PoolKind kind = P.kind == LayerKind::AvgPool   ? PoolKind::Avg
                            : P.kind == LayerKind::MaxPool ? PoolKind::Max
                                                           : PoolKind::None;
      if (kind == PoolKind::None) {
        throw ApplicabilityError("layer " + P.name + ": only pooling may sit between folded blocks");
      }
      if (F.pool != PoolKind::None && F.pool != kind) {
        throw ApplicabilityError("layer " + P.name + ": mixed pooling kinds cannot be folded");
      }
      F.pool = kind;
      k *= P.pool_kernel;
    }
    F.pool_kernel = k;
    in_scale = alpha / a;
    if (F.pool == PoolKind::Avg) in_scale /= static_cast<double>(k * k);
    fm.layers.push_back(std::move(F));
  }

  const std::size_t h = lin.back();
  const auto& H = g.layers[h];
  if (H.kind != LayerKind::FC || H.follows_bn) throw ApplicabilityError("layer " + H.name + ": unsupported head");
  const QuantizedWeight q = quantize_for_folding(model.params(h).weight, H);
  fm.head.name = H.name;
  fm.head.in_features = H.in_channels;
  fm.head.out_features = H.out_channels;
  fm.head.weight_levels = q.levels;
  fm.head.int_weight = q.ints;
  fm.head.logit_scale = in_scale / static_cast<double>(q.levels);
  fm.head.head_rescale = q.rescale;
  return fm;
}

FoldedModel fold_bn(const Checkpoint& ckpt) {
  if (ckpt.kind == "folded") throw ApplicabilityError("model is already folded");
  return fold_bn(model_from_checkpoint(ckpt));
}

namespace {

const char* pool_name(PoolKind k) {
  switch (k) {
    case PoolKind::None: return "none";
    case PoolKind::Avg: return "avg";
    case PoolKind::Max: return "max";
  }
  return "none";
}

PoolKind parse_pool(const std::string& s) {
  if (s == "none") return PoolKind::None;
  if (s == "avg") return PoolKind::Avg;
  if (s == "max") return PoolKind::Max;
  throw FormatError("unknown pool kind '" + s + "'");
}

template <class T>
std::vector<float> as_f32(const std::vector<T>& v) {
  return std::vector<float>(v.begin(), v.end());
}

}  // namespace

Checkpoint checkpoint_from_folded(const FoldedModel& fm, const ModelGraph& source, const std::string& config_hash) {
  Checkpoint c;
  c.kind = "folded";
  c.config_hash = config_hash;
  c.graph = source;
  json layers = json::array();
  for (const auto& F : fm.layers) {
    layers.push_back({{"name", F.name},
                      {"in_channels", F.in_channels},
                      {"out_channels", F.out_channels},
                      {"kernel", F.kernel},
                      {"stride", F.stride},
                      {"pad", F.pad},
                      {"weight_levels", F.weight_levels},
                      {"act_levels", F.act_levels},
                      {"pool", pool_name(F.pool)},
                      {"pool_kernel", F.pool_kernel}});
    const Shape ws{F.out_channels, F.in_channels, F.kernel, F.kernel};
    c.tensors.push_back({F.name + ".int_weight", "int_weight", ws, as_f32(F.int_weight)});
    c.tensors.push_back({F.name + ".offset", "offset", {F.out_channels}, as_f32(F.offset)});
    c.tensors.push_back({F.name + ".clip", "clip", {F.out_channels}, as_f32(F.clip)});
    std::vector<double> sc = F.multiplier;
    sc.push_back(F.in_scale);
    c.tensors.push_back({F.name + ".scale", "scale", {F.out_channels + 1}, as_f32(sc)});
  }
  c.extra = {{"in_channels", fm.in_channels},
             {"image_size", fm.image_size},
             {"classes", fm.classes},
             {"layers", layers},
             {"head",
              {{"name", fm.head.name},
               {"in_features", fm.head.in_features},
               {"out_features", fm.head.out_features},
               {"weight_levels", fm.head.weight_levels}}}};
  const auto& H = fm.head;
  c.tensors.push_back({H.name + ".int_weight", "int_weight", {H.out_features, H.in_features}, as_f32(H.int_weight)});
  c.tensors.push_back({H.name + ".scale", "scale", {2}, {static_cast<float>(H.logit_scale), static_cast<float>(H.head_rescale)}});
  return c;
}

FoldedModel folded_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "folded") throw FormatError("checkpoint is not a folded model");
  auto need = [&](const std::string& name, std::size_t n) -> const std::vector<float>& {
    const TensorEntry* e = c.find(name);
    if (!e || e->values.size() != n) throw FormatError("folded checkpoint lacks tensor " + name);
    return e->values;
  };
  FoldedModel fm;
  try {
    const auto& x = c.extra;
    fm.in_channels = x.at("in_channels").get<std::size_t>();
    fm.image_size = x.at("image_size").get<std::size_t>();
    fm.classes = x.at("classes").get<std::size_t>();
    for (const auto& l : x.at("layers")) {
      FoldedLayer F;
      F.name = l.at("name").get<std::string>();
      F.in_channels = l.at("in_channels").get<std::size_t>();
      F.out_channels = l.at("out_channels").get<std::size_t>();
      F.kernel = l.at("kernel").get<std::size_t>();
      F.stride = l.at("stride").get<std::size_t>();
      F.pad = l.at("pad").get<std::size_t>();
      F.weight_levels = l.at("weight_levels").get<std::int64_t>();
      F.act_levels = l.at("act_levels").get<std::int64_t>();
      F.pool = parse_pool(l.at("pool").get<std::string>());
      F.pool_kernel = l.at("pool_kernel").get<std::size_t>();
      const auto& w = need(F.name + ".int_weight", F.out_channels * F.in_channels * F.kernel * F.kernel);
      for (float v : w) F.int_weight.push_back(static_cast<std::int32_t>(v));
      for (float v : need(F.name + ".offset", F.out_channels)) F.offset.push_back(v);
      for (float v : need(F.name + ".clip", F.out_channels)) F.clip.push_back(v);
      const auto& sc = need(F.name + ".scale", F.out_channels + 1);
      F.multiplier.assign(sc.begin(), sc.end() - 1);
      F.in_scale = sc.back();
      fm.layers.push_back(std::move(F));
    }
    const auto& h = x.at("head");
    fm.head.name = h.at("name").get<std::string>();
    fm.head.in_features = h.at("in_features").get<std::size_t>();
    fm.head.out_features = h.at("out_features").get<std::size_t>();
    fm.head.weight_levels = h.at("weight_levels").get<std::int64_t>();
    for (float v : need(fm.head.name + ".int_weight", fm.head.in_features * fm.head.out_features))
      fm.head.int_weight.push_back(static_cast<std::int32_t>(v));
    const auto& hs = need(fm.head.name + ".scale", 2);
    fm.head.logit_scale = hs[0];
    fm.head.head_rescale = hs[1];
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed folded manifest: ") + e.what());
  }
  return fm;
}

// ---------------------------------------------------------------------------
// Folded inference

namespace {

Tensor weight_tensor(const FoldedLayer& F) {
  Tensor w({F.out_channels, F.in_channels, F.kernel, F.kernel});
  for (std::size_t i = 0; i < F.int_weight.size(); ++i) w[i] = F.int_weight[i];
  return w;
}

// Window sum (average pooling) or max over non-overlapping k x k windows.
template <class T>
std::vector<T> pool_grid(const std::vector<T>& in, std::size_t nc, std::size_t h, std::size_t w, PoolKind kind,
                         std::size_t k) {
  if (kind == PoolKind::None || k == 1) return in;
  if (h % k || w % k) throw ShapeError("folded pool window does not tile the feature map");
  const std::size_t ho = h / k, wo = w / k;
  std::vector<T> out(nc * ho * wo);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T acc = kind == PoolKind::Avg ? T(0) : in[(p * h + oy * k) * w + ox * k];
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const T v = in[(p * h + oy * k + dy) * w + ox * k + dx];
            acc = kind == PoolKind::Avg ? acc + v : std::max(acc, v);
          }
        out[(p * ho + oy) * wo + ox] = acc;
      }
  return out;
}

void check_input(const FoldedModel& fm, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != fm.in_channels) {
    throw ShapeError("folded model expects N x " + std::to_string(fm.in_channels) + " x H x W input, got " +
                     shape_str(x.shape()));
  }
}

}  // namespace

Tensor folded_forward(const FoldedModel& fm, const Tensor& x) {
  check_input(fm, x);
  NoGradGuard guard;
  const std::size_t n = x.dim(0);
  Tensor h = x;
  for (const auto& F : fm.layers) {
    Tensor acc = conv2d(h, weight_tensor(F), F.stride, F.pad);
    const std::size_t c = acc.dim(1), H = acc.dim(2), W = acc.dim(3), plane = H * W;
    std::vector<double> idx(acc.size());
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = (s * c + ch) * plane + p;
          const double v = std::clamp(acc[i] + F.offset[ch], 0.0, F.clip[ch]);
          idx[i] = std::round(F.multiplier[ch] * v);
        }
    auto pooled = pool_grid(idx, n * c, H, W, F.pool, F.pool_kernel);
    const std::size_t k = F.pool == PoolKind::None ? 1 : F.pool_kernel;
    h = Tensor({n, c, H / k, W / k}, std::move(pooled));
  }
  const auto& Hd = fm.head;
  if (h.size() != n * Hd.in_features) throw ShapeError("folded head input has the wrong size");
  Tensor logits({n, Hd.out_features});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < Hd.out_features; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < Hd.in_features; ++i) acc += Hd.int_weight[o * Hd.in_features + i] * h[s * Hd.in_features + i];
      logits[s * Hd.out_features + o] = Hd.logit_scale * acc;
    }
  return logits;
}

namespace {

void check_accumulator(const std::string& name, long double max_in, long double max_w, std::size_t fan_in,
                       long double offset = 0.0L) {
  const long double bound = max_in * max_w * static_cast<long double>(fan_in) + offset;
  if (bound > static_cast<long double>(std::numeric_limits<std::int64_t>::max())) {
    throw OverflowError("layer " + name + ": worst-case accumulator exceeds the 64-bit range");
  }
}

}  // namespace

Tensor integer_forward(const FoldedModel& fm, const Tensor& x) {
  check_input(fm, x);
  const std::size_t n = x.dim(0);
  std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<std::int64_t> cur(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v)) {
      throw DomainError("integer_forward: inputs must be integers in [0, 255]");
    }
    cur[i] = static_cast<std::int64_t>(v);
  }
  long double max_in = 255.0L;
  for (const auto& F : fm.layers) {
    if (F.in_channels != C) throw ShapeError("layer " + F.name + ": channel mismatch");
    const std::size_t k = F.kernel;
    long double max_off = 0.0L;
    for (double o : F.offset) max_off = std::max(max_off, std::abs(static_cast<long double>(o)));
    check_accumulator(F.name, max_in, static_cast<long double>(F.weight_levels), C * k * k, max_off + 1);
    const std::size_t Ho = conv_output_extent(H, k, F.stride, F.pad), Wo = conv_output_extent(W, k, F.stride, F.pad);
    const std::size_t Co = F.out_channels;
    std::vector<std::int64_t> off(Co), clip(Co);
    for (std::size_t c = 0; c < Co; ++c) {
      off[c] = std::llround(F.offset[c]);
      clip[c] = std::max<std::int64_t>(0, std::llround(F.clip[c]));
    }
    std::vector<std::int64_t> out(n * Co * Ho * Wo);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            std::int64_t acc = 0;
            for (std::size_t ci = 0; ci < C; ++ci)
              for (std::size_t ky = 0; ky < k; ++ky) {
                const std::size_t yy = oy * F.stride + ky;
                if (yy < F.pad || yy >= F.pad + H) continue;
                const std::int64_t* row = cur.data() + ((s * C + ci) * H + (yy - F.pad)) * W;
                const std::int32_t* wr = F.int_weight.data() + ((co * C + ci) * k + ky) * k;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::size_t xx = ox * F.stride + kx;
                  if (xx < F.pad || xx >= F.pad + W) continue;
                  acc += static_cast<std::int64_t>(wr[kx]) * row[xx - F.pad];
                }
              }
            const std::int64_t v = std::clamp<std::int64_t>(acc + off[co], 0, clip[co]);
            const std::int64_t q = std::llround(F.multiplier[co] * static_cast<double>(v));
            out[((s * Co + co) * Ho + oy) * Wo + ox] = std::clamp<std::int64_t>(q, 0, F.act_levels);
          }
    cur = pool_grid(out, n * Co, Ho, Wo, F.pool, F.pool_kernel);
    const std::size_t kp = F.pool == PoolKind::None ? 1 : F.pool_kernel;
    C = Co;
    H = Ho / kp;
    W = Wo / kp;
    max_in = static_cast<long double>(F.act_levels) * (F.pool == PoolKind::Avg ? static_cast<long double>(kp * kp) : 1.0L);
  }
  const auto& Hd = fm.head;
  if (C * H * W != Hd.in_features) throw ShapeError("folded head input has the wrong size");
  check_accumulator(Hd.name, max_in, static_cast<long double>(Hd.weight_levels), Hd.in_features);
  Tensor logits({n, Hd.out_features});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < Hd.out_features; ++o) {
      std::int64_t acc = 0;
      for (std::size_t i = 0; i < Hd.in_features; ++i)
        acc += static_cast<std::int64_t>(Hd.int_weight[o * Hd.in_features + i]) * cur[s * Hd.in_features + i];
      logits[s * Hd.out_features + o] = Hd.logit_scale * static_cast<double>(acc);
    }
  return logits;
}

}  // namespace qsat
