#pragma once

#include "ptta/adaptation.hpp"
#include "ptta/checkpoint.hpp"
#include "ptta/data.hpp"
#include "ptta/metrics.hpp"
#include "ptta/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ptta::ms {

// Domain-agnostic backbone and head plus per-stage prompts that split into
// a per-domain block and a shared block: [domain ; shared] per stage.
struct MultiSourceBundle {
  model::PromptViTConfig config;  // prompts_per_stage = domain + shared
  int domain_prompt_count = 0;
  std::vector<std::string> domain_names;
  model::PromptViT model;  // its built-in prompt slots are unused
  std::vector<std::vector<ad::Tensor>> domain_prompts;  // [domain][stage]
  std::vector<ad::Tensor> shared_prompts;               // [stage]

  int shared_prompt_count() const {
    return config.prompts_per_stage - domain_prompt_count;
  }
  int domain_index(const std::string& name) const;  // throws if unknown

  // Tape-recorded concat of the active domain's block with the shared
  // block, so gradients reach exactly those two leaves.
  std::vector<ad::Tensor> stage_prompts(int domain) const;
  model::ForwardOutput forward(const ad::Tensor& images, int domain) const;

  // Backbone and head (without the unused built-in prompt slots), shared
  // prompt blocks, then every domain's blocks, in domain order.
  nn::ParamList parameters() const;
};

// domain_prompt_count == 0 selects prompts_per_stage / 2.
MultiSourceBundle make_bundle(const model::PromptViTConfig& cfg,
                              int domain_prompt_count,
                              std::vector<std::string> domain_names,
                              std::uint64_t seed);

// Rebuilds a bundle saved with kind "multi-source"; the domain prompt
// split is recovered from the stored block shapes.
MultiSourceBundle bundle_from_checkpoint(const ckpt::Checkpoint& c);

struct TrainMultiResult {
  ckpt::Checkpoint checkpoint;  // kind "multi-source"
  std::vector<metrics::StepRecord> history;
  std::vector<int> visit_counts;  // optimization steps per domain
};

// Supervised round-robin training: step t draws a batch from domain
// t mod D and optimizes backbone, head, shared prompts, and that domain's
// prompts only.
TrainMultiResult train_multi_source(const std::vector<data::Dataset>& domains,
                                    const std::vector<std::string>& names,
                                    const model::PromptViTConfig& cfg,
                                    int domain_prompt_count,
                                    const adapt::AdaptationConfig& opt);

// Target-side initialization: per stage, the elementwise mean of all
// domain blocks concatenated with the shared block; backbone and head
// copied over.
model::PromptViT init_target_prompts(const MultiSourceBundle& bundle);

// The same initialization packaged for adapt_offline.
ckpt::Checkpoint init_target_checkpoint(const MultiSourceBundle& bundle,
                                        std::uint64_t seed);

}  // namespace ptta::ms
