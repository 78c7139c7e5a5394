#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace ptta::metrics {

// Bumped whenever a record gains, loses, or renames a field.
inline constexpr int kSchemaVersion = 1;

// Schema, one JSON object per line:
//   header record: {"record":"header","schema_version":1,
//                   "run":<kind>,"seed":<u64>}
//   step record:   {"record":"step","step":n,"lr":x,"loss_total":x,
//                   "loss_pl":x,"loss_cls":x,"loss_prompt":x,"loss_div":x}
//                  plus, when measured, "pl_accuracy" (pseudo-label accuracy
//                  against held-back labels), "batch_accuracy" (streaming
//                  prediction accuracy before the update), and
//                  "eval_accuracy" (class-balanced held-out accuracy);
//                  accuracies are percentages
//   summary record:{"record":"summary","key":<string>,"value":x}
struct StepRecord {
  int step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_pl = 0.0;
  double loss_cls = 0.0;
  double loss_prompt = 0.0;
  double loss_div = 0.0;
  std::optional<double> pl_accuracy;
  std::optional<double> batch_accuracy;
  std::optional<double> eval_accuracy;
};

class JsonlWriter {
 public:
  JsonlWriter(const std::string& path, const std::string& run_kind,
              std::uint64_t seed);

  void step(const StepRecord& rec);
  void summary(const std::string& key, double value);

 private:
  std::ofstream os_;
};

// Minimal CSV plumbing; fields containing commas, quotes, or newlines are
// quoted, doubles are written with round-trip precision.
std::string csv_escape(const std::string& s);
std::string csv_number(double v);

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);

  void row(const std::vector<std::string>& cells);

 private:
  std::ofstream os_;
  std::size_t cols_;
};

// Header "class,count,accuracy" followed by one row per class (accuracy
// blank for classes absent from the eval set) and a final
// "balanced_mean,<total>,<value>" row.
void write_per_class_csv(const std::string& path,
                         const std::vector<double>& per_class_accuracy,
                         const std::vector<int>& per_class_count,
                         double average_accuracy);

// Header "f0,...,f{d-1},label"; one row per sample.
void write_embeddings_csv(const std::string& path,
                          const std::vector<std::vector<double>>& features,
                          const std::vector<int>& labels);

}  // namespace ptta::metrics
