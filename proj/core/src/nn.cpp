#include "ptta/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ptta::nn {

using ad::Tensor;

Tensor find_param(const ParamList& params, const std::string& name) {
  for (const auto& p : params) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named " + name);
}

namespace {

Tensor init_normal(ad::Shape shape, RngStream& rng, double stddev) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

}  // namespace

Linear::Linear(int in, int out, RngStream& rng, double w_std)
    : w(init_normal({in, out}, rng,
                    w_std > 0.0 ? w_std : std::sqrt(1.0 / in))),
      b(Tensor::zeros({out}, true)) {}

Tensor Linear::forward(const Tensor& x) const {
  return ad::linear(x, w, b);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

LayerNorm::LayerNorm(int d)
    : gamma(Tensor::full({d}, 1.0, true)), beta(Tensor::zeros({d}, true)) {}

Tensor LayerNorm::forward(const Tensor& x) const {
  return ad::layer_norm(x, gamma, beta);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

TransformerBlock::TransformerBlock(int d, int heads, double mlp_ratio,
                                   RngStream& rng)
    : d(d),
      heads(heads),
      ln1(d),
      ln2(d),
      qkv(d, 3 * d, rng),
      proj(d, d, rng),
      fc1(d, static_cast<int>(d * mlp_ratio), rng),
      fc2(static_cast<int>(d * mlp_ratio), d, rng) {
  if (d % heads != 0) {
    throw std::invalid_argument("embed dim must be divisible by head count");
  }
}

Tensor TransformerBlock::forward(const Tensor& x) const {
  const int B = x.dim(0);
  const int T = x.dim(1);
  const int dh = d / heads;

  Tensor h = ln1.forward(x);
  Tensor qkv_out = qkv.forward(h);  // (B, T, 3d)
  Tensor q = ad::slice(qkv_out, 2, 0, d);
  Tensor k = ad::slice(qkv_out, 2, d, d);
  Tensor v = ad::slice(qkv_out, 2, 2 * d, d);

  auto to_heads = [&](const Tensor& t) {
    return ad::permute(ad::reshape(t, {B, T, heads, dh}), {0, 2, 1, 3});
  };
  q = to_heads(q);  // (B, H, T, dh)
  k = to_heads(k);
  v = to_heads(v);

  Tensor scores = ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(dh));
  Tensor attn = ad::softmax_lastdim(scores);       // (B, H, T, T)
  Tensor ctx = ad::matmul(attn, v);                // (B, H, T, dh)
  ctx = ad::reshape(ad::permute(ctx, {0, 2, 1, 3}), {B, T, d});
  Tensor out = ad::add(x, proj.forward(ctx));

  Tensor h2 = ln2.forward(out);
  Tensor mlp = fc2.forward(ad::gelu(fc1.forward(h2)));
  return ad::add(out, mlp);
}

void TransformerBlock::collect(const std::string& prefix,
                               ParamList& out) const {
  ln1.collect(prefix + ".ln1", out);
  ln2.collect(prefix + ".ln2", out);
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

SgdMomentum::SgdMomentum(ParamList params, double lr, double momentum,
                         double weight_decay)
    : params_(std::move(params)),
      lr_(lr),
      momentum_(momentum),
      weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) {
    velocity_.emplace_back(p.tensor.size(), 0.0);
  }
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void SgdMomentum::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto theta = params_[i].tensor.raw();
    if (!params_[i].tensor.has_grad()) continue;
    const auto g = params_[i].tensor.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double grad = g[j] + weight_decay_ * theta[j];
      v[j] = momentum_ * v[j] + grad;
      theta[j] -= lr_ * v[j];
    }
  }
}

}  // namespace ptta::nn
