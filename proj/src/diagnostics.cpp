// SPDX-License-Identifier: Apache-2.0
#include "qsat/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>

#include <json.hpp>

#include "qsat/ops.hpp"

namespace qsat {

double kappa0(double var_weight_last, std::size_t n_last, std::size_t k_pool) {
  if (!(var_weight_last > 0.0) || n_last == 0 || k_pool == 0) {
    throw DomainError("kappa0: inputs must be positive");
  }
  const double k = static_cast<double>(k_pool);
  return static_cast<double>(n_last) * var_weight_last / (k * k);
}

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool dead(const LayerStats& a, const LayerStats& b) {
  return !(a.var_grad > 0.0) || !(b.var_grad > 0.0) || !(a.var_weight > 0.0) || !(b.var_weight > 0.0);
}
}  // namespace

double kappa1(const LayerStats& l, const LayerStats& next) {
  if (dead(l, next)) return kNaN;
  const double k = static_cast<double>(l.k_pool);
  return k * k * (static_cast<double>(l.n_in) * l.var_weight) /
         (static_cast<double>(next.n_hat) * next.var_weight) * (l.var_grad / next.var_grad);
}

double kappa2(const LayerStats& l, const LayerStats& next) {
  if (dead(l, next)) return kNaN;
  const double k2 = static_cast<double>(l.k_pool * l.k_pool);
  return k2 * k2 * l.var_grad / (static_cast<double>(next.n_hat) * next.var_weight * next.var_grad);
}

std::vector<DiagnosticsRecord> collect_records(const Model& model, const ForwardTrace& trace,
                                               std::int64_t step, double lr) {
  const auto& g = model.graph();
  const auto lin = g.linear_layers();
  std::vector<LayerStats> stats;
  std::vector<DiagnosticsRecord> out;
  for (std::size_t idx = 0; idx < lin.size(); ++idx) {
    const std::size_t i = lin[idx];
    const auto& L = g.layers[i];
    if (i >= trace.effective.size() || trace.effective[i].empty()) {
      throw ShapeError("collect_records: trace has no effective weight for layer " + L.name);
    }
    const Tensor& xi = trace.effective[i];
    LayerStats s;
    s.n_in = L.fan_in();
    s.n_hat = L.fan_out();
    s.k_pool = g.pool_after(i);
    s.var_weight = mean_square_value(xi.data());
    s.var_grad = xi.has_grad() ? mean_square_value(xi.grad_data()) : 0.0;
    stats.push_back(s);

    DiagnosticsRecord r;
    r.step = step;
    r.layer = i;
    r.n_in = s.n_in;
    r.n_hat = s.n_hat;
    r.k_pool = s.k_pool;
    r.var_weight = s.var_weight;
    r.var_grad = s.var_grad;
    r.lr = lr;
    for (std::size_t j = i + 1; j < g.layers.size() && !g.layers[j].is_linear(); ++j) {
      const auto& P = model.params(j);
      if (P.pact) {
        r.alpha = P.pact->alpha_value();
        break;
      }
    }
    out.push_back(r);
  }
  for (std::size_t idx = 0; idx + 1 < lin.size(); ++idx) {
    auto& r = out[idx];
    r.skip_adjacent = g.skip_adjacent(lin[idx]);
    if (r.skip_adjacent) continue;
    r.kappa1 = kappa1(stats[idx], stats[idx + 1]);
    r.kappa2 = kappa2(stats[idx], stats[idx + 1]);
  }
  if (!lin.empty()) {
    const auto& s = stats.back();
    out.back().kappa0 = s.var_weight > 0.0 ? kappa0(s.var_weight, s.n_in, g.pool_before_head()) : kNaN;
  }
  return out;
}

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {
std::string opt_field(const std::optional<double>& v) {
  if (!v || std::isnan(*v)) return "";
  return format_real(*v);
}
}  // namespace

void write_csv_header(std::ostream& out) { out << kDiagnosticsCsvHeader << '\n'; }

void write_csv_row(std::ostream& out, const DiagnosticsRecord& r) {
  out << r.step << ',' << r.layer << ',' << r.n_in << ',' << r.n_hat << ',' << r.k_pool << ','
      << format_real(r.var_weight) << ',' << format_real(r.var_grad) << ',' << opt_field(r.kappa0) << ','
      << opt_field(r.kappa1) << ',' << opt_field(r.kappa2) << ',' << opt_field(r.alpha) << ','
      << format_real(r.lr) << '\n';
}

std::string records_to_json(const std::vector<DiagnosticsRecord>& records) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    if (!v || !std::isfinite(*v)) return nullptr;
    return *v;
  };
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) {
    arr.push_back({{"step", r.step},
                   {"layer", r.layer},
                   {"n_in", r.n_in},
                   {"n_hat", r.n_hat},
                   {"k_pool", r.k_pool},
                   {"var_weight", r.var_weight},
                   {"var_grad", r.var_grad},
                   {"kappa0", opt(r.kappa0)},
                   {"kappa1", opt(r.kappa1)},
                   {"kappa2", opt(r.kappa2)},
                   {"alpha", opt(r.alpha)},
                   {"lr", r.lr}});
  }
  return arr.dump();
}

// ---------------------------------------------------------------------------

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::Pass: return "PASS";
    case Verdict::Warn: return "WARN";
    case Verdict::Fail: return "FAIL";
  }
  return "FAIL";
}

Verdict etr1_verdict(double k0) {
  if (std::isnan(k0)) return Verdict::Fail;
  if (k0 < 0.1) return Verdict::Pass;
  if (k0 < 1.0) return Verdict::Warn;
  return Verdict::Fail;
}

EtrReport etr_check(const ModelGraph& graph, const std::vector<DiagnosticsRecord>& records) {
  EtrReport rep;
  bool seen_k0 = false;
  for (const auto& r : records) {
    if (!r.kappa0) continue;
    const double k = std::isnan(*r.kappa0) ? std::numeric_limits<double>::infinity() : *r.kappa0;
    rep.kappa0 = seen_k0 ? std::max(rep.kappa0, k) : k;
    seen_k0 = true;
  }
  if (!seen_k0) {
    rep.etr1 = Verdict::Warn;
    rep.details.push_back("ETR I: no kappa0 records");
  } else {
    rep.etr1 = etr1_verdict(rep.kappa0);
    rep.details.push_back("ETR I: kappa0 = " + format_real(rep.kappa0) + " " + to_string(rep.etr1));
  }

  for (std::size_t i : graph.linear_layers()) {
    const auto& L = graph.layers[i];
    if (L.follows_bn) continue;
    if (L.weight.rescale != RescaleMode::None) continue;
    bool any = false, ok = true;
    for (const auto& r : records) {
      if (r.layer != i) continue;
      any = true;
      const double v = r.var_weight * static_cast<double>(r.n_hat);
      if (!(v >= 0.1 && v <= 10.0)) ok = false;
    }
    if (!any) {
      rep.etr2 = std::max(rep.etr2, Verdict::Warn);
      rep.details.push_back("ETR II: no records for unrescaled layer " + L.name);
    } else if (!ok) {
      rep.etr2 = Verdict::Fail;
      rep.details.push_back("ETR II: layer " + L.name + " has n_hat * VAR[Xi] outside [0.1, 10] without rescale");
    }
  }
  rep.details.push_back("ETR II: " + to_string(rep.etr2));
  return rep;
}

// ---------------------------------------------------------------------------

namespace {
double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

Tensor gaussian(std::mt19937_64& rng, std::size_t count, double variance) {
  std::normal_distribution<double> dist(0.0, std::sqrt(variance));
  Tensor w({count});
  for (auto& v : w.data()) v = dist(rng);
  return w;
}
}  // namespace

std::vector<StudyRow> clamp_variance_study(const std::vector<std::size_t>& n_values, std::size_t samples,
                                           std::uint64_t seed, int repeats) {
  if (repeats < 1 || samples == 0) throw DomainError("clamp_variance_study: need samples and repeats");
  NoGradGuard guard;
  std::mt19937_64 rng(seed);
  std::vector<StudyRow> out;
  for (std::size_t n : n_values) {
    if (n == 0) throw DomainError("clamp_variance_study: n must be positive");
    std::vector<double> ratios;
    for (int r = 0; r < repeats; ++r) {
      Tensor w = gaussian(rng, samples, 1.0 / static_cast<double>(n));
      Tensor w_hat = signed_clamped(dorefa_clamp(w));
      ratios.push_back(mean_square_value(w_hat.data()) / mean_square_value(w.data()));
    }
    out.push_back({static_cast<double>(n), median(ratios)});
  }
  return out;
}

std::vector<StudyRow> quant_variance_study(const std::vector<int>& bits, std::size_t n, std::size_t samples,
                                           std::uint64_t seed, int repeats) {
  if (repeats < 1 || samples == 0 || n == 0) throw DomainError("quant_variance_study: invalid arguments");
  NoGradGuard guard;
  std::mt19937_64 rng(seed);
  std::vector<StudyRow> out;
  for (int b : bits) {
    quant_levels(b);
    std::vector<double> ratios;
    for (int r = 0; r < repeats; ++r) {
      Tensor w = gaussian(rng, samples, 1.0 / static_cast<double>(n));
      Tensor w_tilde = dorefa_clamp(w);
      const double ms_hat = mean_square_value(signed_clamped(w_tilde).data());
      const double ms_q = mean_square_value(quantize_weight(w_tilde, b).data());
      ratios.push_back(std::sqrt(ms_q / ms_hat));
    }
    out.push_back({static_cast<double>(b), median(ratios)});
  }
  return out;
}

}  // namespace qsat
