#include "ptta/model.hpp"

#include <cmath>
#include <stdexcept>

namespace ptta::model {

using ad::Shape;
using ad::Tensor;

Variant variant_from_string(const std::string& s) {
  if (s == "S" || s == "shallow") return Variant::Shallow;
  if (s == "G" || s == "grouped") return Variant::Grouped;
  if (s == "D" || s == "deep") return Variant::Deep;
  throw std::invalid_argument("unknown variant '" + s +
                              "' (expected S, G or D)");
}

std::string variant_to_string(Variant v) {
  switch (v) {
    case Variant::Shallow: return "S";
    case Variant::Grouped: return "G";
    case Variant::Deep: return "D";
  }
  return "?";
}

int stages_for_variant(Variant v, int num_layers) {
  switch (v) {
    case Variant::Shallow: return 1;
    case Variant::Grouped: return 4;
    case Variant::Deep: return num_layers;
  }
  return 1;
}

void PromptViTConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("model config: " + msg);
  };
  if (image_size <= 0 || patch_size <= 0) fail("non-positive image or patch size");
  if (image_size % patch_size != 0) fail("patch size must divide image size");
  if (in_chans <= 0) fail("non-positive channel count");
  if (num_layers <= 0) fail("non-positive layer count");
  if (num_stages <= 0 || num_layers % num_stages != 0)
    fail("stage count must divide layer count");
  if (prompts_per_stage < 1) fail("prompts per stage must be at least 1");
  if (embed_dim < num_heads) fail("embed dim smaller than head count");
  if (embed_dim % num_heads != 0) fail("head count must divide embed dim");
  if (mlp_ratio <= 0.0) fail("non-positive mlp ratio");
  if (num_classes < 2) fail("need at least two classes");
}

StageLayout stage_layout(int num_layers, int num_stages) {
  if (num_stages <= 0 || num_layers % num_stages != 0) {
    throw std::invalid_argument(
        "stage_layout: stage count must divide layer count");
  }
  const int m = num_layers / num_stages;
  StageLayout out;
  for (int s = 0; s < num_stages; ++s) {
    out.insertion_layers.push_back(s * m + 1);
    out.extraction_layers.push_back((s + 1) * m);
  }
  return out;
}

Tensor patchify(const ad::Tensor& images, int patch_size) {
  if (images.rank() != 4) {
    throw std::invalid_argument("patchify: expected (B, ch, H, W)");
  }
  const int B = images.dim(0), ch = images.dim(1), H = images.dim(2),
            W = images.dim(3);
  if (H % patch_size != 0 || W % patch_size != 0) {
    throw std::invalid_argument("patchify: patch size must divide H and W");
  }
  const int gh = H / patch_size, gw = W / patch_size;
  const int P = gh * gw;
  const int pd = ch * patch_size * patch_size;
  std::vector<double> out(static_cast<std::size_t>(B) * P * pd);
  const auto in = images.data();
  for (int b = 0; b < B; ++b) {
    for (int py = 0; py < gh; ++py) {
      for (int px = 0; px < gw; ++px) {
        double* dst = out.data() +
                      (static_cast<std::int64_t>(b) * P + py * gw + px) * pd;
        for (int c = 0; c < ch; ++c) {
          for (int dy = 0; dy < patch_size; ++dy) {
            const double* src =
                in.data() +
                ((static_cast<std::int64_t>(b) * ch + c) * H +
                 (py * patch_size + dy)) *
                    W +
                px * patch_size;
            for (int dx = 0; dx < patch_size; ++dx) {
              dst[(c * patch_size + dy) * patch_size + dx] = src[dx];
            }
          }
        }
      }
    }
  }
  return Tensor::from_data({B, P, pd}, std::move(out));
}

PromptViT::PromptViT(PromptViTConfig cfg, RngStream& rng) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.embed_dim;
  patch_embed_ = nn::Linear(cfg_.patch_dim(), d, rng);

  {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal(0.0, 0.02);
    cls_token_ = Tensor::from_data({1, d}, std::move(v), true);
  }
  {
    const int rows = 1 + cfg_.num_patches();
    std::vector<double> v(static_cast<std::size_t>(rows) * d);
    for (auto& x : v) x = rng.normal(0.0, 0.02);
    pos_embed_ = Tensor::from_data({rows, d}, std::move(v), true);
  }

  blocks_.reserve(cfg_.num_layers);
  for (int i = 0; i < cfg_.num_layers; ++i) {
    blocks_.emplace_back(d, cfg_.num_heads, cfg_.mlp_ratio, rng);
  }
  ln_f_ = nn::LayerNorm(d);
  head_ = nn::Linear(d, cfg_.num_classes, rng);

  // fan-in style uniform init for prompt vectors
  const double r = std::sqrt(6.0 / d);
  prompts_.reserve(cfg_.num_stages);
  for (int s = 0; s < cfg_.num_stages; ++s) {
    std::vector<double> v(static_cast<std::size_t>(cfg_.prompts_per_stage) * d);
    for (auto& x : v) x = rng.uniform(-r, r);
    prompts_.push_back(
        Tensor::from_data({cfg_.prompts_per_stage, d}, std::move(v), true));
  }
}

ForwardOutput PromptViT::forward(const Tensor& images) const {
  return forward_with_prompts(images, prompts_);
}

ForwardOutput PromptViT::forward_with_prompts(
    const Tensor& images, const std::vector<Tensor>& stage_prompts) const {
  if (images.rank() != 4 || images.dim(1) != cfg_.in_chans ||
      images.dim(2) != cfg_.image_size || images.dim(3) != cfg_.image_size) {
    throw std::invalid_argument("forward: image batch shape " +
                                ad::shape_str(images.shape()) +
                                " does not match the configured geometry");
  }
  const int B = images.dim(0);
  const int P = cfg_.num_patches();
  const int d = cfg_.embed_dim;
  const int p = cfg_.prompts_per_stage;
  const int m = cfg_.stage_len();
  if (static_cast<int>(stage_prompts.size()) != cfg_.num_stages) {
    throw std::invalid_argument("forward: expected one prompt tensor per stage");
  }
  for (const auto& sp : stage_prompts) {
    if (sp.rank() != 2 || sp.dim(0) != p || sp.dim(1) != d) {
      throw std::invalid_argument("forward: stage prompt shape " +
                                  ad::shape_str(sp.shape()) +
                                  " does not match the configured geometry");
    }
  }

  Tensor patches = patchify(images, cfg_.patch_size);
  Tensor embedded = patch_embed_.forward(patches);  // (B, P, d)
  Tensor cls = ad::broadcast_to(cls_token_, {B, 1, d});
  Tensor tokens = ad::concat({cls, embedded}, 1);  // (B, 1+P, d)
  tokens = ad::add_broadcast(tokens, pos_embed_);

  ForwardOutput out;
  out.aggregated_prompts.reserve(cfg_.num_stages);
  for (int s = 0; s < cfg_.num_stages; ++s) {
    Tensor block = ad::broadcast_to(stage_prompts[s], {B, p, d});
    Tensor seq = ad::concat({tokens, block}, 1);  // (B, 1+P+p, d)
    for (int l = s * m; l < (s + 1) * m; ++l) {
      seq = blocks_[l].forward(seq);
    }
    tokens = ad::slice(seq, 1, 0, 1 + P);
    out.aggregated_prompts.push_back(ad::slice(seq, 1, 1 + P, p));
  }

  Tensor normed = ln_f_.forward(tokens);
  out.cls_feature = ad::reshape(ad::slice(normed, 1, 0, 1), {B, d});
  out.logits = head_.forward(out.cls_feature);
  return out;
}

nn::ParamList PromptViT::parameters() const {
  nn::ParamList out;
  patch_embed_.collect("patch_embed", out);
  out.push_back({"cls_token", cls_token_});
  out.push_back({"pos_embed", pos_embed_});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect("blocks." + std::to_string(i), out);
  }
  ln_f_.collect("ln_f", out);
  head_.collect("head", out);
  for (std::size_t s = 0; s < prompts_.size(); ++s) {
    out.push_back({"prompts." + std::to_string(s), prompts_[s]});
  }
  return out;
}

nn::ParamList PromptViT::adaptation_parameters() const {
  nn::ParamList out;
  for (std::size_t s = 0; s < prompts_.size(); ++s) {
    out.push_back({"prompts." + std::to_string(s), prompts_[s]});
  }
  head_.collect("head", out);
  return out;
}

nn::ParamList PromptViT::trainable_parameters() const {
  nn::ParamList out;
  for (auto& p : parameters()) {
    if (p.tensor.requires_grad()) out.push_back(p);
  }
  return out;
}

std::int64_t PromptViT::count_params(Phase phase) const {
  const auto list =
      phase == Phase::Source ? parameters() : adaptation_parameters();
  std::int64_t total = 0;
  for (const auto& p : list) total += p.tensor.size();
  return total;
}

void PromptViT::freeze_for_adaptation() {
  for (auto& p : parameters()) p.tensor.set_requires_grad(false);
  for (auto& p : adaptation_parameters()) p.tensor.set_requires_grad(true);
}

void PromptViT::set_all_trainable() {
  for (auto& p : parameters()) p.tensor.set_requires_grad(true);
}

std::int64_t count_tunable_params(const PromptViTConfig& cfg, Phase phase) {
  cfg.validate();
  const std::int64_t d = cfg.embed_dim;
  const std::int64_t C = cfg.num_classes;
  const std::int64_t prompts =
      static_cast<std::int64_t>(cfg.num_stages) * cfg.prompts_per_stage * d;
  const std::int64_t head = d * C + C;
  if (phase == Phase::Adaptation) return prompts + head;

  const std::int64_t hidden = static_cast<std::int64_t>(d * cfg.mlp_ratio);
  const std::int64_t per_block = 2 * d + 2 * d        // two layer norms
                                 + d * 3 * d + 3 * d  // qkv
                                 + d * d + d          // attn out proj
                                 + d * hidden + hidden  // mlp in
                                 + hidden * d + d;      // mlp out
  const std::int64_t backbone = cfg.patch_dim() * d + d  // patch embedding
                                + d                      // cls token
                                + (1 + cfg.num_patches()) * d  // pos embed
                                + cfg.num_layers * per_block + 2 * d;  // ln_f
  return backbone + head + prompts;
}

void copy_parameters(const nn::ParamList& src, const nn::ParamList& dst) {
  if (src.size() != dst.size()) {
    throw std::invalid_argument("copy_parameters: list size mismatch");
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name ||
        src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw std::invalid_argument("copy_parameters: mismatch at " +
                                  src[i].name + " vs " + dst[i].name);
    }
    auto d = const_cast<nn::NamedParam&>(dst[i]).tensor.raw();
    const auto s = src[i].tensor.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

}  // namespace ptta::model
