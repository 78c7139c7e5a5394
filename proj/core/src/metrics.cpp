#include "ptta/metrics.hpp"

#include <cstdio>
#include <stdexcept>

#include "json.hpp"

namespace ptta::metrics {

namespace {

using nlohmann::json;

void write_line(std::ofstream& os, const json& obj) {
  os << obj.dump() << "\n";
  if (!os) throw std::runtime_error("metrics: write failed");
}

}  // namespace

JsonlWriter::JsonlWriter(const std::string& path, const std::string& run_kind,
                         std::uint64_t seed)
    : os_(path) {
  if (!os_) {
    throw std::runtime_error("metrics: cannot open '" + path + "' for writing");
  }
  write_line(os_, json{{"record", "header"},
                       {"schema_version", kSchemaVersion},
                       {"run", run_kind},
                       {"seed", seed}});
}

void JsonlWriter::step(const StepRecord& rec) {
  json obj{{"record", "step"},
           {"step", rec.step},
           {"lr", rec.lr},
           {"loss_total", rec.loss_total},
           {"loss_pl", rec.loss_pl},
           {"loss_cls", rec.loss_cls},
           {"loss_prompt", rec.loss_prompt},
           {"loss_div", rec.loss_div}};
  if (rec.pl_accuracy) obj["pl_accuracy"] = *rec.pl_accuracy;
  if (rec.batch_accuracy) obj["batch_accuracy"] = *rec.batch_accuracy;
  if (rec.eval_accuracy) obj["eval_accuracy"] = *rec.eval_accuracy;
  write_line(os_, obj);
}

void JsonlWriter::summary(const std::string& key, double value) {
  write_line(os_, json{{"record", "summary"}, {"key", key}, {"value", value}});
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path,
                     const std::vector<std::string>& header)
    : os_(path), cols_(header.size()) {
  if (!os_) {
    throw std::runtime_error("metrics: cannot open '" + path + "' for writing");
  }
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != cols_) {
    throw std::invalid_argument("metrics: csv row has " +
                                std::to_string(cells.size()) + " cells, expected " +
                                std::to_string(cols_));
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) os_ << ",";
    os_ << csv_escape(cells[i]);
  }
  os_ << "\n";
  if (!os_) throw std::runtime_error("metrics: write failed");
}

void write_per_class_csv(const std::string& path,
                         const std::vector<double>& per_class_accuracy,
                         const std::vector<int>& per_class_count,
                         double average_accuracy) {
  if (per_class_accuracy.size() != per_class_count.size()) {
    throw std::invalid_argument("metrics: per-class vectors disagree in length");
  }
  CsvWriter w(path, {"class", "count", "accuracy"});
  int total = 0;
  for (std::size_t c = 0; c < per_class_accuracy.size(); ++c) {
    total += per_class_count[c];
    const std::string acc =
        per_class_count[c] > 0 ? csv_number(per_class_accuracy[c]) : "";
    w.row({std::to_string(c), std::to_string(per_class_count[c]), acc});
  }
  w.row({"balanced_mean", std::to_string(total), csv_number(average_accuracy)});
}

void write_embeddings_csv(const std::string& path,
                          const std::vector<std::vector<double>>& features,
                          const std::vector<int>& labels) {
  if (features.size() != labels.size()) {
    throw std::invalid_argument("metrics: features/labels disagree in length");
  }
  const std::size_t d = features.empty() ? 0 : features.front().size();
  std::vector<std::string> header;
  header.reserve(d + 1);
  for (std::size_t j = 0; j < d; ++j) header.push_back("f" + std::to_string(j));
  header.push_back("label");
  CsvWriter w(path, header);
  std::vector<std::string> cells(d + 1);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != d) {
      throw std::invalid_argument("metrics: ragged feature rows");
    }
    for (std::size_t j = 0; j < d; ++j) cells[j] = csv_number(features[i][j]);
    cells[d] = std::to_string(labels[i]);
    w.row(cells);
  }
}

}  // namespace ptta::metrics
