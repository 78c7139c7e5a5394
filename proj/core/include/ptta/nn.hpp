#pragma once

#include "ptta/rng.hpp"
#include "ptta/tensor.hpp"

#include <string>
#include <vector>

namespace ptta::nn {

struct NamedParam {
  std::string name;
  ad::Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

// Finds a parameter by exact name; throws if absent.
ad::Tensor find_param(const ParamList& params, const std::string& name);

struct Linear {
  ad::Tensor w;  // (in, out)
  ad::Tensor b;  // (out)

  Linear() = default;
  // Non-positive w_std selects fan-in scaling, sqrt(1/in).
  Linear(int in, int out, RngStream& rng, double w_std = 0.0);

  ad::Tensor forward(const ad::Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  ad::Tensor gamma;
  ad::Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(int d);

  ad::Tensor forward(const ad::Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Pre-LN transformer encoder block with full self-attention.
struct TransformerBlock {
  int d = 0;
  int heads = 0;
  LayerNorm ln1, ln2;
  Linear qkv;   // d -> 3d
  Linear proj;  // d -> d
  Linear fc1;   // d -> mlp_hidden
  Linear fc2;   // mlp_hidden -> d

  TransformerBlock() = default;
  TransformerBlock(int d, int heads, double mlp_ratio, RngStream& rng);

  // x: (B, T, d) -> (B, T, d)
  ad::Tensor forward(const ad::Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// SGD with classical momentum and loss-coupled weight decay:
//   g <- g + wd * theta; v <- mu * v + g; theta <- theta - lr * v
class SgdMomentum {
 public:
  SgdMomentum(ParamList params, double lr, double momentum = 0.9,
              double weight_decay = 1e-4);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void zero_grad();
  void step();

 private:
  ParamList params_;
  std::vector<std::vector<double>> velocity_;
  double lr_;
  double momentum_;
  double weight_decay_;
};

}  // namespace ptta::nn
