// SPDX-License-Identifier: Apache-2.0
//
// Efficient-training metrics and the two weight-variance studies.
//
//   kappa0 = n_L * VAR[Xi_L] / k_pool^2
//   kappa1 = k_l^2 * (n_l VAR[Xi_l]) / (n_hat_{l+1} VAR[Xi_{l+1}]) * VAR[g_l] / VAR[g_{l+1}]
//   kappa2 = k_l^4 * VAR[g_l] / (n_hat_{l+1} VAR[Xi_{l+1}] VAR[g_{l+1}])
//
// VAR is the uncentered mean square throughout.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qsat/network.hpp"

namespace qsat {

struct LayerStats {
  std::size_t n_in = 1;
  std::size_t n_hat = 1;
  std::size_t k_pool = 1;
  double var_weight = 0.0;
  double var_grad = 0.0;
};

// Throws DomainError unless every input is positive.
double kappa0(double var_weight_last, std::size_t n_last, std::size_t k_pool);
// NaN when either gradient variance is zero (dead layer).
double kappa1(const LayerStats& layer, const LayerStats& next);
double kappa2(const LayerStats& layer, const LayerStats& next);

struct DiagnosticsRecord {
  std::int64_t step = 0;
  std::size_t layer = 0;
  std::size_t n_in = 0;
  std::size_t n_hat = 0;
  std::size_t k_pool = 1;
  double var_weight = 0.0;
  double var_grad = 0.0;
  std::optional<double> kappa0;  // last linear layer only
  std::optional<double> kappa1;  // pair (layer, next linear layer); NaN for dead layers
  std::optional<double> kappa2;
  // The pair straddles a residual add; kappa1/kappa2 are left empty.
  bool skip_adjacent = false;
  std::optional<double> alpha;  // PACT level of the activation after this layer
  double lr = 0.0;
};

// One record per linear layer, taken after backward() on a forward pass that
// filled `trace`. Gradient variances are those of dL/dXi.
std::vector<DiagnosticsRecord> collect_records(const Model& model, const ForwardTrace& trace,
                                               std::int64_t step, double lr);

inline const char* kDiagnosticsCsvHeader =
    "step,layer,n_in,n_hat,k_pool,var_weight,var_grad,kappa0,kappa1,kappa2,alpha,lr";

void write_csv_header(std::ostream& out);
void write_csv_row(std::ostream& out, const DiagnosticsRecord& r);
std::string records_to_json(const std::vector<DiagnosticsRecord>& records);
// Shortest round-trip decimal form; NaN prints as "nan".
std::string format_real(double v);

// ---------------------------------------------------------------------------
// Rule checks

enum class Verdict { Pass, Warn, Fail };
std::string to_string(Verdict v);

struct EtrReport {
  Verdict etr1 = Verdict::Pass;
  Verdict etr2 = Verdict::Pass;
  double kappa0 = 0.0;  // largest kappa0 seen
  std::vector<std::string> details;
  bool all_pass() const { return etr1 == Verdict::Pass && etr2 == Verdict::Pass; }
};

Verdict etr1_verdict(double kappa0);
// ETR I uses the largest kappa0 in the stream. ETR II requires every no-BN
// linear layer to be rescaled or to keep n_hat * VAR[Xi] within [0.1, 10].
EtrReport etr_check(const ModelGraph& graph, const std::vector<DiagnosticsRecord>& records);

// ---------------------------------------------------------------------------
// Variance studies

struct StudyRow {
  double x = 0.0;      // n or b
  double ratio = 0.0;  // median over repeats
};

// mean_square(2 * dorefa_clamp(W) - 1) / mean_square(W) for Gaussian W with
// variance 1/n and `samples` elements.
std::vector<StudyRow> clamp_variance_study(const std::vector<std::size_t>& n_values, std::size_t samples,
                                           std::uint64_t seed, int repeats = 5);

// sqrt(mean_square(Q_b) / mean_square(W_hat)) for Gaussian W with variance 1/n.
std::vector<StudyRow> quant_variance_study(const std::vector<int>& bits, std::size_t n, std::size_t samples,
                                           std::uint64_t seed, int repeats = 5);

}  // namespace qsat
