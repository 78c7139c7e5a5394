#pragma once

#include "ptta/nn.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ptta::model {

// Prompt depth variants: Shallow (M=1), Grouped (M=4), Deep (M=N).
enum class Variant { Shallow, Grouped, Deep };

Variant variant_from_string(const std::string& s);
std::string variant_to_string(Variant v);
int stages_for_variant(Variant v, int num_layers);

struct PromptViTConfig {
  int image_size = 32;
  int patch_size = 8;
  int in_chans = 3;
  int num_layers = 4;        // N
  int num_stages = 4;        // M, must divide N
  int prompts_per_stage = 4; // p
  int embed_dim = 64;        // d
  int num_heads = 4;
  double mlp_ratio = 4.0;
  int num_classes = 8;       // C

  int stage_len() const { return num_layers / num_stages; }
  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const {
    return patches_per_side() * patches_per_side();
  }
  int patch_dim() const { return in_chans * patch_size * patch_size; }

  void validate() const;  // throws std::invalid_argument
  bool operator==(const PromptViTConfig&) const = default;
};

struct StageLayout {
  std::vector<int> insertion_layers;   // 1-indexed, {1, m+1, ..., N-m+1}
  std::vector<int> extraction_layers;  // {m, 2m, ..., N}
};

StageLayout stage_layout(int num_layers, int num_stages);

struct ForwardOutput {
  ad::Tensor logits;       // (B, C)
  ad::Tensor cls_feature;  // (B, d), after the final layer norm
  std::vector<ad::Tensor> aggregated_prompts;  // M entries, each (B, p, d)
};

// (B, ch, H, W) -> (B, num_patches, ch*patch*patch). Patches scan row-major
// over the grid; within a patch, channel-major then row-major pixels.
// Pure data rearrangement, never recorded on the tape.
ad::Tensor patchify(const ad::Tensor& images, int patch_size);

enum class Phase { Source, Adaptation };

class PromptViT {
 public:
  PromptViT(PromptViTConfig cfg, RngStream& rng);

  const PromptViTConfig& config() const { return cfg_; }

  // images: (B, in_chans, image_size, image_size)
  ForwardOutput forward(const ad::Tensor& images) const;

  // Same pass with caller-supplied per-stage prompt tensors (each
  // (prompts_per_stage, embed_dim), possibly tape-recorded composites).
  ForwardOutput forward_with_prompts(
      const ad::Tensor& images,
      const std::vector<ad::Tensor>& stage_prompts) const;

  // All parameters in a stable order with stable names.
  nn::ParamList parameters() const;
  // Prompts plus classification head, the adaptation-phase trainable set.
  nn::ParamList adaptation_parameters() const;
  nn::ParamList trainable_parameters() const;

  std::int64_t count_params(Phase phase) const;

  void freeze_for_adaptation();
  void set_all_trainable();

  std::vector<ad::Tensor>& prompts() { return prompts_; }
  const std::vector<ad::Tensor>& prompts() const { return prompts_; }
  nn::Linear& head() { return head_; }

 private:
  PromptViTConfig cfg_;
  nn::Linear patch_embed_;
  ad::Tensor cls_token_;  // (1, d)
  ad::Tensor pos_embed_;  // (1 + num_patches, d)
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_f_;
  nn::Linear head_;
  std::vector<ad::Tensor> prompts_;  // M tensors, each (p, d)
};

// Closed-form parameter accounting from the config alone, so large
// configurations can be audited without allocating their weights.
std::int64_t count_tunable_params(const PromptViTConfig& cfg, Phase phase);

// Copies values from src into dst; both must expose identical names/shapes.
void copy_parameters(const nn::ParamList& src, const nn::ParamList& dst);

}  // namespace ptta::model
