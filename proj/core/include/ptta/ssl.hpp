#pragma once

#include "ptta/nn.hpp"
#include "ptta/tensor.hpp"

#include <span>
#include <vector>

namespace ptta::ssl {

// 2-layer MLP d -> 2d -> K used for all self-supervised projections.
struct ProjectionHead {
  nn::Linear fc1;
  nn::Linear fc2;

  ProjectionHead() = default;
  ProjectionHead(int d, int k, RngStream& rng);

  ad::Tensor forward(const ad::Tensor& x) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;
};

// One head for the CLS feature plus one per prompt stage.
struct ProjectionHeads {
  int k = 0;
  ProjectionHead cls_head;
  std::vector<ProjectionHead> stage_heads;

  ProjectionHeads() = default;
  ProjectionHeads(int d, int k, int num_stages, RngStream& rng);

  struct Projected {
    ad::Tensor cls_proj;                    // (B, K)
    std::vector<ad::Tensor> prompt_projs;   // M entries, each (B, p, K)
  };
  Projected project(const ad::Tensor& cls_feature,
                    const std::vector<ad::Tensor>& aggregated_prompts) const;

  nn::ParamList parameters() const;
  void set_requires_grad(bool rg);
};

struct DinoCenterState {
  std::vector<double> center;  // K, starts at zero
  double center_momentum = 0.9;
  double student_temp = 0.1;
  double teacher_temp_lo = 0.04;
  double teacher_temp_hi = 0.07;

  DinoCenterState() = default;
  explicit DinoCenterState(int k) : center(k, 0.0) {}

  // Linear warmup from lo to hi over the first tenth of the run, then flat.
  double teacher_temp(int step, int total_steps) const;
};

// softmax(x / tau) over the last dim; stays on the tape for the student.
ad::Tensor sharpen_student(const ad::Tensor& cls_proj, double tau);

// softmax((x - center) / tau') rows for the teacher; plain values, off-tape.
std::vector<double> sharpen_center_teacher(std::span<const double> cls_proj,
                                           int k,
                                           const DinoCenterState& state,
                                           double teacher_temp);

// center <- momentum * center + (1 - momentum) * batch_mean(projs)
void update_center(DinoCenterState& state, std::span<const double> projs,
                   int rows);

// Mean over rows of H(P', P) = -sum_k P'_k log P_k. Gradients flow through
// the student distribution only.
ad::Tensor dino_cls_loss(std::span<const double> teacher_probs,
                         const ad::Tensor& student_probs);

// Numerically fused equivalent used by the training loop:
// H(P', softmax(logits / tau)) without materializing the student softmax.
ad::Tensor dino_cls_loss_from_logits(std::span<const double> teacher_probs,
                                     const ad::Tensor& student_proj,
                                     double tau);

// (1 / (M * B)) sum over stages, rows of 2 - 2 cos(student, teacher).
// Teacher projections are constants.
ad::Tensor prompt_alignment_loss(
    const std::vector<ad::Tensor>& student_prompt_projs,
    const std::vector<std::vector<double>>& teacher_prompt_projs);

// (1 / (M * B)) sum over stages, samples, unordered row pairs of 1 - cos.
ad::Tensor prompt_diversity_loss(
    const std::vector<ad::Tensor>& student_prompt_projs);

struct LossWeights {
  double alpha = 1.0;
  double beta1 = 0.1;
  double beta2 = 0.1;
  double lambda = 0.005;  // beta / 20

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

// alpha*l_pl + beta1*l_cls + beta2*l_prompt - lambda*l_div
ad::Tensor total_loss(const ad::Tensor& l_pl, const ad::Tensor& l_cls,
                      const ad::Tensor& l_prompt, const ad::Tensor& l_div,
                      const LossWeights& w);

}  // namespace ptta::ssl
