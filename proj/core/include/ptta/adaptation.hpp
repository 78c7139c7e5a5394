#pragma once

#include "ptta/checkpoint.hpp"
#include "ptta/data.hpp"
#include "ptta/metrics.hpp"
#include "ptta/model.hpp"
#include "ptta/ssl.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ptta::adapt {

enum class Schedule { Cosine, None };
enum class Mode { Offline, Online };

Schedule schedule_from_string(const std::string& s);
Mode mode_from_string(const std::string& s);
std::string schedule_to_string(Schedule s);
std::string mode_to_string(Mode m);

struct AdaptationConfig {
  double learning_rate = 5e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  Schedule schedule = Schedule::Cosine;
  int batch_size = 32;
  int steps = 500;
  int top_k = 3;
  int bank_capacity = 0;  // 0 selects min(working set size, 2048)
  double ema_momentum = 0.999;
  ssl::LossWeights loss_weights;
  Mode mode = Mode::Offline;
  double data_ratio = 1.0;
  std::uint64_t seed = 0;
  bool use_bank = true;   // off: pseudo label = argmax of the weak view
  int proj_dim = 256;     // K of the self-supervised projection heads
  int eval_interval = 50;
  int eval_subset = 256;  // images per held-out monitoring eval; 0 = all

  void validate() const;  // throws std::invalid_argument
  bool operator==(const AdaptationConfig&) const = default;
};

// Percentages throughout; per-class slots for classes absent from the eval
// set are NaN and excluded from the balanced mean (with a warning).
struct EvalResult {
  std::vector<double> per_class_accuracy;
  std::vector<int> per_class_count;
  double average_accuracy = 0.0;  // unweighted mean over present classes
  double overall_accuracy = 0.0;  // sample-weighted
};

EvalResult evaluate(const model::PromptViT& m, const data::Dataset& ds,
                    int batch_size = 64);

// Rebuilds a model from a checkpoint's config and restores its parameters.
model::PromptViT make_model(const ckpt::Checkpoint& c);

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> val;
};

// Per-class shuffle, then val_fraction of each class (at least one sample
// when the class has two or more) goes to validation.
SplitIndices stratified_split(const data::Dataset& ds, double val_fraction,
                              RngStream& rng);

struct TrainSourceResult {
  ckpt::Checkpoint best;  // kind "source", best validation accuracy
  double best_val_accuracy = 0.0;
  std::vector<metrics::StepRecord> history;
};

// Supervised training of every parameter on a stratified 90/10 split;
// keeps the best-validation snapshot.
TrainSourceResult train_source(const model::PromptViTConfig& cfg,
                               const data::Dataset& labeled,
                               const AdaptationConfig& opt);

struct AdaptResult {
  ckpt::Checkpoint adapted;  // kind "adapted", model parameters only
  ckpt::Checkpoint teacher;  // kind "teacher", the EMA mirror's parameters
  std::vector<metrics::StepRecord> history;
  bool diverged = false;
  int updates = 0;
  // Online protocol: fraction of weak-view predictions made before each
  // update that were correct, as a percentage over the whole stream.
  double streaming_accuracy = 0.0;
};

// Offline test-time adaptation: teacher/student from the checkpoint, frozen
// backbone, bank-refined pseudo-labels, hierarchical self-supervision, EMA
// teacher, cosine LR decay.
AdaptResult adapt_offline(const ckpt::Checkpoint& source,
                          const data::Dataset& target,
                          const AdaptationConfig& opt);

// Single-pass streaming variant: no memory bank, pseudo label = argmax of
// the student's weak-view softmax, constant learning rate, one update per
// batch, accuracy recorded before each update.
AdaptResult adapt_online(const ckpt::Checkpoint& source,
                         const data::Dataset& target_stream,
                         const AdaptationConfig& opt);

enum class AblationVariant {
  PseudoLabelOnly,    // no bank, alpha only
  PseudoLabelBank,    // bank on, alpha only
  PseudoLabelBankCls, // bank on, alpha + beta1
  Full,
};

std::string ablation_name(AblationVariant v);

// Applies a variant's switches (bank flag, zeroed loss terms) to a base
// configuration.
AdaptationConfig ablation_config(AdaptationConfig base, AblationVariant v);

struct AblationRow {
  std::string name;
  double accuracy = 0.0;  // class-balanced target accuracy after adaptation
  bool diverged = false;
};

std::vector<AblationRow> run_ablation(const ckpt::Checkpoint& source,
                                      const data::Dataset& target,
                                      const AdaptationConfig& base);

}  // namespace ptta::adapt
