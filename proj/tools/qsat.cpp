// SPDX-License-Identifier: Apache-2.0
//
// qsat: train, eval, diagnose, study, fold.
//
// Exit codes: 0 ok, 1 diagnose found WARN/FAIL, 2 usage or config error,
// 3 dataset error, 4 non-finite loss, 5 model cannot be folded,
// 6 unreadable or malformed checkpoint.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "qsat/deployment.hpp"
#include "qsat/diagnostics.hpp"
#include "qsat/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qsat;

namespace {

enum Exit { kOk = 0, kRuleFailed = 1, kConfig = 2, kDataset = 3, kDiverged = 4, kFold = 5, kCheckpoint = 6 };

struct Args {
  std::string config;
  std::string init;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  bool force = false;
  // study
  std::string study;
  std::size_t samples = 10000;
  int repeats = 5;
  std::size_t n = 1024;
};

// A directory that holds no previous run output: `base` itself, or base-1,
// base-2, ... unless --force.
fs::path fresh_dir(const fs::path& base, bool force, std::initializer_list<const char*> outputs) {
  auto taken = [&](const fs::path& p) {
    for (const char* f : outputs)
      if (fs::exists(p / f)) return true;
    return false;
  };
  fs::path dir = base;
  for (int i = 1; !force && taken(dir); ++i) dir = base.string() + "-" + std::to_string(i);
  fs::create_directories(dir);
  return dir;
}

TrainConfig config_from(const Args& a) {
  if (a.config.empty()) throw ConfigError("--config is required");
  TrainConfig cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.dataset.empty()) cfg.data_dir = a.dataset;
  if (!a.init.empty()) cfg.init = a.init;
  return cfg;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << s;
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

void summary(const json& j) { std::cout << j.dump() << std::endl; }

int cmd_train(const Args& a) {
  TrainConfig cfg = config_from(a);
  if (cfg.quantized() && cfg.init.empty()) {
    throw ConfigError("config key 'init': quantized training needs a full-precision checkpoint (--init)");
  }
  Model model = make_model(cfg);
  if (!cfg.init.empty()) {
    const Checkpoint ck = read_checkpoint(cfg.init);
    if (ck.config_hash != config_hash(cfg)) {
      std::cerr << "warning: checkpoint " << cfg.init << " was produced by a different config (hash "
                << ck.config_hash << ", current " << config_hash(cfg) << ")\n";
    }
    for (const auto& name : load_into(model, ck)) {
      std::cerr << "note: " << name << " not in checkpoint; keeping its initial value\n";
    }
    model.round_to_storage();
  }
  const DataSplits data = load_data(cfg);

  const fs::path dir = fresh_dir(a.out.empty() ? fs::path("runs") / fs::path(a.config).stem() : fs::path(a.out),
                                 a.force, {"model.ckpt", "metrics.csv", "diagnostics.csv"});
  write_text(dir / "config.txt", to_text(cfg));
  const std::string hash = config_hash(cfg);
  save_checkpoint(model, (dir / "model.ckpt").string(), hash);

  std::ofstream metrics(dir / "metrics.csv", std::ios::trunc), diag(dir / "diagnostics.csv", std::ios::trunc);
  metrics << kMetricsCsvHeader << '\n';
  write_csv_header(diag);
  TrainSinks sinks;
  sinks.metrics = &metrics;
  sinks.diagnostics = &diag;
  sinks.on_epoch_end = [&](const Model& m, int epoch) {
    Model copy = m.clone();
    save_checkpoint(copy, (dir / "model.ckpt").string(), hash);
    std::cerr << "epoch " << epoch << " done\n";
  };
  for (const auto& v : model.graph().violations()) std::cerr << "warning: " << v << '\n';
  try {
    const TrainResult r = train(model, cfg, data.train, data.val, sinks);
    summary({{"command", "train"},
             {"out", dir.string()},
             {"epochs", cfg.epochs},
             {"val_top1", r.final_val.top1},
             {"val_top5", r.final_val.top5},
             {"val_loss", r.final_val.loss}});
  } catch (const DivergenceError& e) {
    metrics.flush();
    diag.flush();
    std::cerr << "error: " << e.what() << "; last good checkpoint kept at " << (dir / "model.ckpt").string() << '\n';
    summary({{"command", "train"}, {"out", dir.string()}, {"error", e.what()}});
    return kDiverged;
  }
  return kOk;
}

int cmd_eval(const Args& a) {
  if (a.init.empty()) throw ConfigError("--init <checkpoint> is required");
  TrainConfig cfg = config_from(a);
  const Checkpoint ck = read_checkpoint(a.init);
  const DataSplits data = load_data(cfg);
  json out = {{"command", "eval"}, {"checkpoint", a.init}, {"kind", ck.kind}};
  if (ck.kind == "folded") {
    const FoldedModel fm = folded_from_checkpoint(ck);
    std::size_t hit1 = 0, hit5 = 0;
    const Dataset& d = data.val;
    if (d.size() == 0) throw DatasetError("evaluate: empty dataset");
    for (std::size_t start = 0; start < d.size(); start += 100) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(d.size(), start + 100); ++i) idx.push_back(i);
      const Tensor logits = integer_forward(fm, batch_images(d, idx));
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto y = static_cast<std::size_t>(d.labels[idx[i]]);
        const double t = logits[i * k + y];
        std::size_t rank = 0;
        for (std::size_t j = 0; j < k; ++j) {
          const double v = logits[i * k + j];
          if (v > t || (v == t && j < y)) ++rank;
        }
        hit1 += rank == 0;
        hit5 += rank < 5;
      }
    }
    out["top1"] = static_cast<double>(hit1) / static_cast<double>(d.size());
    out["top5"] = static_cast<double>(hit5) / static_cast<double>(d.size());
  } else {
    Model model = model_from_checkpoint(ck);
    const EvalResult r = evaluate(model, data.val);
    out["top1"] = r.top1;
    out["top5"] = r.top5;
    out["loss"] = r.loss;
  }
  std::cerr << "Acc.-1 " << out["top1"].get<double>() << "  Acc.-5 " << out["top5"].get<double>() << '\n';
  summary(out);
  return kOk;
}

int cmd_diagnose(const Args& a) {
  if (a.init.empty()) throw ConfigError("--init <checkpoint> is required");
  TrainConfig cfg = config_from(a);
  Model model = load_checkpoint(a.init);
  const DataSplits data = load_data(cfg);
  const std::size_t bs = std::min(cfg.batch_size, data.train.size());
  if (bs < 2) throw DatasetError("diagnose needs at least two training samples");
  std::vector<std::size_t> idx(bs);
  for (std::size_t i = 0; i < bs; ++i) idx[i] = i;

  ForwardTrace trace;
  Tensor logits = model.forward(batch_images(data.train, idx), true, &trace);
  backward(cross_entropy(logits, batch_labels(data.train, idx)));
  const auto records = collect_records(model, trace, 0, 0.0);
  const EtrReport rep = etr_check(model.graph(), records);

  std::cerr << "rule     verdict\n";
  std::cerr << "ETR I    " << to_string(rep.etr1) << "   kappa0 = " << format_real(rep.kappa0) << '\n';
  std::cerr << "ETR II   " << to_string(rep.etr2) << '\n';
  for (const auto& d : rep.details) std::cerr << "  " << d << '\n';
  for (const auto& v : model.graph().violations()) std::cerr << "  warning: " << v << '\n';

  if (!a.out.empty()) {
    const fs::path dir = fresh_dir(a.out, a.force, {"diagnostics.csv"});
    std::ofstream f(dir / "diagnostics.csv", std::ios::trunc);
    write_csv_header(f);
    for (const auto& r : records) write_csv_row(f, r);
  }
  summary({{"command", "diagnose"},
           {"etr1", to_string(rep.etr1)},
           {"etr2", to_string(rep.etr2)},
           {"kappa0", rep.kappa0},
           {"records", json::parse(records_to_json(records))}});
  return rep.all_pass() ? kOk : kRuleFailed;
}

int cmd_study(const Args& a) {
  const std::uint64_t seed = a.seed.value_or(1);
  std::vector<StudyRow> rows;
  std::string xname;
  if (a.study == "clamp-var") {
    rows = clamp_variance_study({10, 100, 1000, 10000}, a.samples, seed, a.repeats);
    xname = "n";
  } else if (a.study == "quant-var") {
    rows = quant_variance_study({1, 2, 3, 4, 5, 6, 7, 8}, a.n, a.samples, seed, a.repeats);
    xname = "bits";
  } else {
    throw ConfigError("unknown study '" + a.study + "' (expected clamp-var|quant-var)");
  }
  std::ostringstream csv;
  csv << xname << ",ratio\n";
  for (const auto& r : rows) csv << format_real(r.x) << ',' << format_real(r.ratio) << '\n';
  const fs::path dir = fresh_dir(a.out.empty() ? fs::path("runs") / "study" : fs::path(a.out), a.force,
                                 {"clamp-var.csv", "quant-var.csv"});
  const fs::path file = dir / (a.study + ".csv");
  write_text(file, csv.str());
  std::cerr << csv.str();
  json j = {{"command", "study"}, {"study", a.study}, {"csv", file.string()}, {"rows", json::array()}};
  for (const auto& r : rows) j["rows"].push_back({{xname, r.x}, {"ratio", r.ratio}});
  summary(j);
  return kOk;
}

int cmd_fold(const Args& a) {
  if (a.init.empty()) throw ConfigError("--init <checkpoint> is required");
  const Checkpoint ck = read_checkpoint(a.init);
  const FoldedModel fm = fold_bn(ck);
  const fs::path dir = fresh_dir(a.out.empty() ? fs::path("runs") / "folded" : fs::path(a.out), a.force, {"folded.ckpt"});
  const fs::path file = dir / "folded.ckpt";
  write_checkpoint(checkpoint_from_folded(fm, ck.graph, ck.config_hash), file.string());
  summary({{"command", "fold"}, {"out", file.string()}, {"layers", fm.layers.size() + 1},
           {"head_rescale", fm.head.head_rescale}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization-aware training toolkit"};
  app.require_subcommand(1);
  Args a;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", a.config, "key=value run config");
    if (needs_config) c->required();
    sub->add_option("--init", a.init, "checkpoint to start from / evaluate");
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", a.out, "output directory");
    sub->add_option("--dataset", a.dataset, "dataset directory (overrides data_dir)");
    sub->add_flag("--force", a.force, "overwrite outputs of a previous run");
  };
  auto* train_cmd = app.add_subcommand("train", "train or finetune a model");
  common(train_cmd, true);
  auto* eval_cmd = app.add_subcommand("eval", "top-1 / top-5 accuracy of a checkpoint");
  common(eval_cmd, true);
  auto* diag_cmd = app.add_subcommand("diagnose", "efficient-training rule check of a checkpoint");
  common(diag_cmd, true);
  auto* study_cmd = app.add_subcommand("study", "weight variance studies");
  common(study_cmd, false);
  study_cmd->add_option("name", a.study, "clamp-var | quant-var")->required();
  study_cmd->add_option("--samples", a.samples, "elements per weight tensor")->check(CLI::PositiveNumber);
  study_cmd->add_option("--repeats", a.repeats, "repeats per point (median)")->check(CLI::PositiveNumber);
  study_cmd->add_option("--n", a.n, "neurons for quant-var")->check(CLI::PositiveNumber);
  auto* fold_cmd = app.add_subcommand("fold", "fold batch norm into an integer inference model");
  common(fold_cmd, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  for (auto* sub : {train_cmd, eval_cmd, diag_cmd, study_cmd, fold_cmd})
    if (sub->parsed() && sub->count("--seed")) a.seed = seed;

  try {
    if (train_cmd->parsed()) return cmd_train(a);
    if (eval_cmd->parsed()) return cmd_eval(a);
    if (diag_cmd->parsed()) return cmd_diagnose(a);
    if (study_cmd->parsed()) return cmd_study(a);
    if (fold_cmd->parsed()) return cmd_fold(a);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DatasetError& e) {
    std::cerr << "dataset error: " << e.what() << '\n';
    return kDataset;
  } catch (const ApplicabilityError& e) {
    std::cerr << "cannot fold: " << e.what() << '\n';
    return kFold;
  } catch (const DegenerateError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return fold_cmd->parsed() ? kFold : kConfig;
  } catch (const FormatError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  }
  return kConfig;
}
