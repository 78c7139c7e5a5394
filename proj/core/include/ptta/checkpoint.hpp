#pragma once

#include "ptta/model.hpp"
#include "ptta/nn.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ptta::ckpt {

// Serialized named-parameter map plus model config, run seed, and a format
// version. Multi-source checkpoints additionally carry the source domain
// names whose prompt blocks they store.
struct Checkpoint {
  std::string kind;  // "source" | "adapted" | "multi-source"
  model::PromptViTConfig config;
  std::uint64_t seed = 0;
  std::vector<std::string> domains;
  std::vector<nn::NamedParam> params;

  const ad::Tensor& tensor(const std::string& name) const;  // throws
  bool has(const std::string& name) const;
};

// Deep-copies the parameter values; the stored tensors never carry grads.
Checkpoint capture(std::string kind, const model::PromptViTConfig& config,
                   std::uint64_t seed, const nn::ParamList& params,
                   std::vector<std::string> domains = {});

void save(const Checkpoint& c, const std::string& path);
Checkpoint load(const std::string& path);

// Copies checkpoint values into the destination parameters. The checkpoint
// and destination must expose exactly the same names with exactly the same
// shapes; any missing, extra, or reshaped entry throws with its name.
void restore(const Checkpoint& c, const nn::ParamList& dst);

}  // namespace ptta::ckpt
