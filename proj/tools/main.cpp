#include "CLI11.hpp"

#include "ptta/adaptation.hpp"
#include "ptta/checkpoint.hpp"
#include "ptta/config.hpp"
#include "ptta/data.hpp"
#include "ptta/metrics.hpp"
#include "ptta/model.hpp"
#include "ptta/multi_source.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ptta;

namespace {

struct CliArgs {
  std::string config_path;
  std::optional<std::string> output;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
};

void attach_common(CLI::App* sub, CliArgs& args) {
  sub->add_option("--config", args.config_path, "experiment config file")
      ->required();
  sub->add_option("--output", args.output, "override output_dir");
  sub->add_option("--seed", args.seed, "override the run seed");
  sub->add_option("--steps", args.steps, "override adapt.steps");
}

cfg::ExperimentConfig load_with_overrides(const CliArgs& args) {
  cfg::ExperimentConfig c = cfg::load_config(args.config_path);
  if (args.output) c.output_dir = *args.output;
  if (args.seed) c.seed = *args.seed;
  if (args.steps) c.adaptation.steps = *args.steps;
  try {
    c.finalize();
  } catch (const std::exception& e) {
    throw std::runtime_error(args.config_path + ": " + e.what());
  }
  return c;
}

// Every run directory gets the exact resolved configuration (itself enough
// to reproduce the run) plus the seed spelled out on its own.
fs::path prepare_run_dir(const cfg::ExperimentConfig& c) {
  const fs::path dir = c.output_dir;
  fs::create_directories(dir);
  cfg::save_config(c, (dir / "config.cfg").string());
  std::ofstream seed_file(dir / "seed.txt");
  seed_file << c.seed << "\n";
  return dir;
}

ckpt::Checkpoint load_required_checkpoint(const cfg::ExperimentConfig& c,
                                          const std::string& subcommand) {
  if (c.checkpoint.empty()) {
    throw std::runtime_error("config: '" + subcommand +
                             "' needs the checkpoint key to name an input "
                             "checkpoint");
  }
  if (!fs::exists(c.checkpoint)) {
    throw std::runtime_error("checkpoint: '" + c.checkpoint +
                             "' does not exist");
  }
  return ckpt::load(c.checkpoint);
}

void write_history(metrics::JsonlWriter& jsonl,
                   const std::vector<metrics::StepRecord>& history) {
  for (const auto& rec : history) jsonl.step(rec);
}

adapt::EvalResult eval_checkpoint(const ckpt::Checkpoint& c,
                                  const data::Dataset& ds) {
  const model::PromptViT m = adapt::make_model(c);
  return adapt::evaluate(m, ds);
}

void report_eval(const fs::path& dir, const adapt::EvalResult& r) {
  metrics::write_per_class_csv((dir / "per_class.csv").string(),
                               r.per_class_accuracy, r.per_class_count,
                               r.average_accuracy);
  std::cout << "balanced accuracy: " << r.average_accuracy << "%\n"
            << "overall accuracy:  " << r.overall_accuracy << "%\n"
            << "per-class table:   " << (dir / "per_class.csv").string()
            << "\n";
}

// Source domains for multi-source training: the configured shift axis,
// swept from clean to the configured severity, one rung per domain, each
// rendered with its own derived seed.
std::vector<data::Dataset> multi_source_domains(
    const cfg::ExperimentConfig& c) {
  const int d = static_cast<int>(c.multi_domains.size());
  std::vector<data::Dataset> out;
  out.reserve(d);
  for (int i = 0; i < d; ++i) {
    data::DomainShiftSpec spec = c.data;
    spec.severity = d > 1 ? c.data.severity * i / (d - 1) : 0.0;
    spec.seed = splitmix64(c.data.seed ^ fnv1a64(c.multi_domains[i]));
    out.push_back(data::make_synthetic_shift(spec).second);
  }
  return out;
}

int run_train_source(const CliArgs& args) {
  const cfg::ExperimentConfig c = load_with_overrides(args);
  const fs::path dir = prepare_run_dir(c);

  if (c.multi_domains.empty()) {
    const auto [source_ds, target_ds] = data::make_synthetic_shift(c.data);
    const auto res = adapt::train_source(c.model, source_ds, c.adaptation);
    ckpt::save(res.best, (dir / "source.ckpt").string());
    metrics::JsonlWriter jsonl((dir / "metrics.jsonl").string(),
                               "train-source", c.seed);
    write_history(jsonl, res.history);
    jsonl.summary("best_val_accuracy", res.best_val_accuracy);
    std::cout << "trained source model for " << res.history.size()
              << " steps, best validation accuracy " << res.best_val_accuracy
              << "%\ncheckpoint: " << (dir / "source.ckpt").string() << "\n";
    return 0;
  }

  const auto domains = multi_source_domains(c);
  const auto res =
      ms::train_multi_source(domains, c.multi_domains, c.model,
                             c.multi_domain_prompts, c.adaptation);
  ckpt::save(res.checkpoint, (dir / "multi_source.ckpt").string());
  metrics::JsonlWriter jsonl((dir / "metrics.jsonl").string(), "train-multi",
                             c.seed);
  write_history(jsonl, res.history);
  for (std::size_t i = 0; i < res.visit_counts.size(); ++i) {
    jsonl.summary("visits." + c.multi_domains[i], res.visit_counts[i]);
  }
  std::cout << "trained " << domains.size() << "-domain bundle for "
            << res.history.size() << " steps\ncheckpoint: "
            << (dir / "multi_source.ckpt").string() << "\n";
  return 0;
}

std::string ratio_label(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", ratio);
  return buf;
}

adapt::EvalResult finish_adapt_run(const cfg::ExperimentConfig& c,
                                   const fs::path& dir,
                                   const adapt::AdaptResult& res,
                                   const char* run_kind,
                                   const data::Dataset& target_ds) {
  ckpt::save(res.adapted, (dir / "adapted.ckpt").string());
  ckpt::save(res.teacher, (dir / "teacher.ckpt").string());
  metrics::JsonlWriter jsonl((dir / "metrics.jsonl").string(), run_kind,
                             c.seed);
  write_history(jsonl, res.history);
  jsonl.summary("updates", res.updates);
  jsonl.summary("diverged", res.diverged ? 1.0 : 0.0);

  const auto eval = eval_checkpoint(res.adapted, target_ds);
  jsonl.summary("target_balanced_accuracy", eval.average_accuracy);
  jsonl.summary("target_overall_accuracy", eval.overall_accuracy);
  if (std::string(run_kind) == "adapt-online") {
    jsonl.summary("streaming_accuracy", res.streaming_accuracy);
    std::cout << "streaming accuracy: " << res.streaming_accuracy << "%\n";
  }
  if (res.diverged) std::cout << "warning: the run diverged and stopped early\n";
  std::cout << "updates: " << res.updates << "\n";
  report_eval(dir, eval);
  std::cout << "adapted checkpoint: " << (dir / "adapted.ckpt").string()
            << "\n";
  return eval;
}

int run_adapt(const CliArgs& args) {
  cfg::ExperimentConfig c = load_with_overrides(args);
  c.adaptation.mode = adapt::Mode::Offline;
  const ckpt::Checkpoint source = load_required_checkpoint(c, "adapt");
  const fs::path dir = prepare_run_dir(c);
  const auto target_ds = data::make_synthetic_shift(c.data).second;
  const auto res = adapt::adapt_offline(source, target_ds, c.adaptation);
  finish_adapt_run(c, dir, res, "adapt", target_ds);
  return 0;
}

int run_adapt_online(const CliArgs& args) {
  cfg::ExperimentConfig c = load_with_overrides(args);
  c.adaptation.mode = adapt::Mode::Online;
  const ckpt::Checkpoint source = load_required_checkpoint(c, "adapt-online");
  const fs::path dir = prepare_run_dir(c);
  const auto target_ds = data::make_synthetic_shift(c.data).second;
  const auto res = adapt::adapt_online(source, target_ds, c.adaptation);
  finish_adapt_run(c, dir, res, "adapt-online", target_ds);
  return 0;
}

int run_adapt_multi(const CliArgs& args) {
  cfg::ExperimentConfig c = load_with_overrides(args);
  c.adaptation.mode = adapt::Mode::Offline;
  const ckpt::Checkpoint stored = load_required_checkpoint(c, "adapt-multi");
  const ms::MultiSourceBundle bundle = ms::bundle_from_checkpoint(stored);
  const ckpt::Checkpoint start = ms::init_target_checkpoint(bundle, c.seed);
  const fs::path dir = prepare_run_dir(c);
  const auto target_ds = data::make_synthetic_shift(c.data).second;
  const auto res = adapt::adapt_offline(start, target_ds, c.adaptation);
  finish_adapt_run(c, dir, res, "adapt-multi", target_ds);
  return 0;
}

int run_eval(const CliArgs& args) {
  const cfg::ExperimentConfig c = load_with_overrides(args);
  const ckpt::Checkpoint stored = load_required_checkpoint(c, "eval");
  const fs::path dir = prepare_run_dir(c);
  const auto target_ds = data::make_synthetic_shift(c.data).second;
  const auto eval = eval_checkpoint(stored, target_ds);
  metrics::JsonlWriter jsonl((dir / "metrics.jsonl").string(), "eval", c.seed);
  jsonl.summary("target_balanced_accuracy", eval.average_accuracy);
  jsonl.summary("target_overall_accuracy", eval.overall_accuracy);
  report_eval(dir, eval);
  return 0;
}

int run_sweep(const CliArgs& args) {
  const cfg::ExperimentConfig base = load_with_overrides(args);
  const ckpt::Checkpoint source = load_required_checkpoint(base, "sweep");
  const fs::path dir = prepare_run_dir(base);
  const auto target_ds = data::make_synthetic_shift(base.data).second;

  metrics::CsvWriter summary(
      (dir / "summary.csv").string(),
      {"ratio", "balanced_accuracy", "overall_accuracy", "updates",
       "diverged"});
  for (const double ratio : {0.01, 0.1, 0.5, 1.0}) {
    cfg::ExperimentConfig c = base;
    c.adaptation.mode = adapt::Mode::Offline;
    c.adaptation.data_ratio = ratio;
    c.output_dir = (dir / ("ratio_" + ratio_label(ratio))).string();
    c.finalize();
    const fs::path run_dir = prepare_run_dir(c);
    const auto res = adapt::adapt_offline(source, target_ds, c.adaptation);
    const auto eval = finish_adapt_run(c, run_dir, res, "adapt", target_ds);
    summary.row({ratio_label(ratio),
                 metrics::csv_number(eval.average_accuracy),
                 metrics::csv_number(eval.overall_accuracy),
                 std::to_string(res.updates),
                 res.diverged ? "1" : "0"});
    std::cout << "ratio " << ratio << ": balanced accuracy "
              << eval.average_accuracy << "%\n";
  }
  std::cout << "sweep summary: " << (dir / "summary.csv").string() << "\n";
  return 0;
}

int run_export_embeddings(const CliArgs& args) {
  const cfg::ExperimentConfig c = load_with_overrides(args);
  const ckpt::Checkpoint stored =
      load_required_checkpoint(c, "export-embeddings");
  const fs::path dir = prepare_run_dir(c);
  const auto target_ds = data::make_synthetic_shift(c.data).second;
  const model::PromptViT m = adapt::make_model(stored);

  const int n = static_cast<int>(target_ds.size());
  const int d = m.config().embed_dim;
  std::vector<std::vector<double>> features;
  features.reserve(n);
  ad::NoGradGuard ng;
  for (int start = 0; start < n; start += 64) {
    const int len = std::min(64, n - start);
    std::vector<int> idx(len);
    for (int i = 0; i < len; ++i) idx[i] = start + i;
    const auto out = m.forward(data::to_tensor(target_ds, idx));
    const auto f = out.cls_feature.data();
    for (int i = 0; i < len; ++i) {
      const auto row = f.subspan(static_cast<std::size_t>(i) * d, d);
      features.emplace_back(row.begin(), row.end());
    }
  }
  metrics::write_embeddings_csv((dir / "embeddings.csv").string(), features,
                                target_ds.labels);
  std::cout << "wrote " << n << " x " << (d + 1) << " embedding table: "
            << (dir / "embeddings.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"source-free test-time adaptation via prompt tuning"};
  app.require_subcommand(1);

  CliArgs args;
  auto* train_source = app.add_subcommand(
      "train-source",
      "supervised source training (multi-domain when multi.domains is set)");
  auto* adapt_cmd =
      app.add_subcommand("adapt", "offline adaptation of a source checkpoint");
  auto* adapt_online =
      app.add_subcommand("adapt-online", "single-pass streaming adaptation");
  auto* adapt_multi = app.add_subcommand(
      "adapt-multi", "average a multi-source bundle's prompts, then adapt");
  auto* eval_cmd =
      app.add_subcommand("eval", "accuracy table of a checkpoint on the target");
  auto* sweep = app.add_subcommand(
      "sweep", "offline adaptation across data ratios 0.01/0.1/0.5/1.0");
  auto* export_emb = app.add_subcommand(
      "export-embeddings", "per-sample CLS features + labels as CSV");
  for (auto* sub : {train_source, adapt_cmd, adapt_online, adapt_multi,
                    eval_cmd, sweep, export_emb}) {
    attach_common(sub, args);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_source->parsed()) return run_train_source(args);
    if (adapt_cmd->parsed()) return run_adapt(args);
    if (adapt_online->parsed()) return run_adapt_online(args);
    if (adapt_multi->parsed()) return run_adapt_multi(args);
    if (eval_cmd->parsed()) return run_eval(args);
    if (sweep->parsed()) return run_sweep(args);
    if (export_emb->parsed()) return run_export_embeddings(args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
