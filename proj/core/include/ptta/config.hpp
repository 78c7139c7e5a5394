#pragma once

#include "ptta/adaptation.hpp"
#include "ptta/data.hpp"
#include "ptta/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ptta::cfg {

// One experiment: model geometry, prompt variant, adaptation recipe,
// synthetic data spec, output directory, and the run seed every substream
// derives from. Parsed from flat `key = value` text with a fixed typed
// schema; unknown keys, duplicates, and ill-typed values are errors that
// carry the file name and line number.
struct ExperimentConfig {
  model::PromptViTConfig model;
  model::Variant variant = model::Variant::Grouped;
  adapt::AdaptationConfig adaptation;
  data::DomainShiftSpec data;
  std::vector<std::string> multi_domains;  // adapt-multi source names
  int multi_domain_prompts = 0;            // 0 selects half of each stage
  std::string checkpoint;                  // input checkpoint, where needed
  std::string output_dir = "runs/out";
  std::uint64_t seed = 0;

  // Syncs derived fields (stage count from the variant; data classes,
  // geometry, and seed; adaptation seed) and validates everything.
  void finalize();

  bool operator==(const ExperimentConfig&) const = default;
};

// `origin` names the text in error messages ("file.cfg:12: ...").
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::string& origin);
ExperimentConfig load_config(const std::string& path);

// Every schema key with its resolved value; parsing the text reproduces
// the config exactly.
std::string to_text(const ExperimentConfig& c);
void save_config(const ExperimentConfig& c, const std::string& path);

}  // namespace ptta::cfg
