#include "ptta/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ptta::ssl {

using ad::Tensor;

ProjectionHead::ProjectionHead(int d, int k, RngStream& rng)
    : fc1(d, 2 * d, rng), fc2(2 * d, k, rng) {}

Tensor ProjectionHead::forward(const Tensor& x) const {
  return fc2.forward(ad::gelu(fc1.forward(x)));
}

void ProjectionHead::collect(const std::string& prefix,
                             nn::ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

ProjectionHeads::ProjectionHeads(int d, int k, int num_stages, RngStream& rng)
    : k(k), cls_head(d, k, rng) {
  stage_heads.reserve(num_stages);
  for (int s = 0; s < num_stages; ++s) {
    stage_heads.emplace_back(d, k, rng);
  }
}

ProjectionHeads::Projected ProjectionHeads::project(
    const Tensor& cls_feature,
    const std::vector<Tensor>& aggregated_prompts) const {
  if (aggregated_prompts.size() != stage_heads.size()) {
    throw std::invalid_argument("project: stage count mismatch");
  }
  Projected out;
  out.cls_proj = cls_head.forward(cls_feature);
  out.prompt_projs.reserve(stage_heads.size());
  for (std::size_t i = 0; i < stage_heads.size(); ++i) {
    out.prompt_projs.push_back(stage_heads[i].forward(aggregated_prompts[i]));
  }
  return out;
}

nn::ParamList ProjectionHeads::parameters() const {
  nn::ParamList out;
  cls_head.collect("proj.cls", out);
  for (std::size_t s = 0; s < stage_heads.size(); ++s) {
    stage_heads[s].collect("proj.stages." + std::to_string(s), out);
  }
  return out;
}

void ProjectionHeads::set_requires_grad(bool rg) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(rg);
}

double DinoCenterState::teacher_temp(int step, int total_steps) const {
  const int warmup = std::max(1, total_steps / 10);
  if (step >= warmup) return teacher_temp_hi;
  const double t = static_cast<double>(step) / warmup;
  return teacher_temp_lo + (teacher_temp_hi - teacher_temp_lo) * t;
}

Tensor sharpen_student(const Tensor& cls_proj, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("sharpen: tau must be > 0");
  return ad::softmax_lastdim(ad::scale(cls_proj, 1.0 / tau));
}

std::vector<double> sharpen_center_teacher(std::span<const double> cls_proj,
                                           int k,
                                           const DinoCenterState& state,
                                           double teacher_temp) {
  if (teacher_temp <= 0.0) {
    throw std::invalid_argument("sharpen: teacher temp must be > 0");
  }
  if (static_cast<int>(state.center.size()) != k) {
    throw std::invalid_argument("sharpen: center dim mismatch");
  }
  const std::size_t rows = cls_proj.size() / k;
  std::vector<double> out(cls_proj.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = cls_proj.data() + r * k;
    double* y = out.data() + r * k;
    double m = -1e300;
    for (int j = 0; j < k; ++j) {
      y[j] = (x[j] - state.center[j]) / teacher_temp;
      m = std::max(m, y[j]);
    }
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      y[j] = std::exp(y[j] - m);
      sum += y[j];
    }
    for (int j = 0; j < k; ++j) y[j] /= sum;
  }
  return out;
}

void update_center(DinoCenterState& state, std::span<const double> projs,
                   int rows) {
  if (rows < 1) throw std::invalid_argument("update_center: empty batch");
  const int k = static_cast<int>(state.center.size());
  if (static_cast<int>(projs.size()) != rows * k) {
    throw std::invalid_argument("update_center: size mismatch");
  }
  for (int j = 0; j < k; ++j) {
    double mean = 0.0;
    for (int r = 0; r < rows; ++r) mean += projs[r * k + j];
    mean /= rows;
    state.center[j] =
        state.center_momentum * state.center[j] +
        (1.0 - state.center_momentum) * mean;
  }
}

Tensor dino_cls_loss(std::span<const double> teacher_probs,
                     const Tensor& student_probs) {
  return ad::cross_entropy_probs(teacher_probs, student_probs);
}

Tensor dino_cls_loss_from_logits(std::span<const double> teacher_probs,
                                 const Tensor& student_proj, double tau) {
  return ad::soft_cross_entropy_sharpen(student_proj, teacher_probs, tau);
}

Tensor prompt_alignment_loss(
    const std::vector<Tensor>& student_prompt_projs,
    const std::vector<std::vector<double>>& teacher_prompt_projs) {
  if (student_prompt_projs.empty() ||
      student_prompt_projs.size() != teacher_prompt_projs.size()) {
    throw std::invalid_argument("alignment: stage count mismatch");
  }
  const int stages = static_cast<int>(student_prompt_projs.size());
  const int batch = student_prompt_projs[0].dim(0);
  Tensor acc = ad::cosine_align_sum(student_prompt_projs[0],
                                    teacher_prompt_projs[0]);
  for (int i = 1; i < stages; ++i) {
    acc = ad::add(acc, ad::cosine_align_sum(student_prompt_projs[i],
                                            teacher_prompt_projs[i]));
  }
  return ad::scale(acc, 1.0 / (static_cast<double>(stages) * batch));
}

Tensor prompt_diversity_loss(const std::vector<Tensor>& student_prompt_projs) {
  if (student_prompt_projs.empty()) {
    throw std::invalid_argument("diversity: no stages");
  }
  const int stages = static_cast<int>(student_prompt_projs.size());
  const int batch = student_prompt_projs[0].dim(0);
  Tensor acc = ad::cosine_diversity_sum(student_prompt_projs[0]);
  for (int i = 1; i < stages; ++i) {
    acc = ad::add(acc, ad::cosine_diversity_sum(student_prompt_projs[i]));
  }
  return ad::scale(acc, 1.0 / (static_cast<double>(stages) * batch));
}

void LossWeights::validate() const {
  if (alpha < 0 || beta1 < 0 || beta2 < 0 || lambda < 0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

Tensor total_loss(const Tensor& l_pl, const Tensor& l_cls,
                  const Tensor& l_prompt, const Tensor& l_div,
                  const LossWeights& w) {
  w.validate();
  Tensor acc = ad::add(ad::scale(l_pl, w.alpha), ad::scale(l_cls, w.beta1));
  acc = ad::add(acc, ad::scale(l_prompt, w.beta2));
  return ad::sub(acc, ad::scale(l_div, w.lambda));
}

}  // namespace ptta::ssl
