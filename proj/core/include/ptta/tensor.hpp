#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ptta::ad {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Reverse-mode autodiff over dense row-major double tensors. Graphs are
// built eagerly; backward() walks the recorded tape. Leaf tensors own the
// trainable parameters; their grad buffers accumulate across backward
// calls until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int i) const;
  std::int64_t size() const;

  std::span<const double> data() const;
  // Mutable access to the raw values. Meant for leaves (parameter
  // initialization, optimizer updates); mutating an interior node breaks
  // the recorded graph.
  std::span<double> raw();
  std::span<const double> grad() const;
  bool has_grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  // Drops the gradient buffer; has_grad() turns false until the next
  // backward pass reaches this tensor.
  void zero_grad();

  // Backpropagates from this scalar tensor.
  void backward() const;

  double item() const;

  // Value copy detached from the graph.
  Tensor detach() const;
  // Deep copy that stays a leaf.
  Tensor clone() const;

  NodePtr node() const { return node_; }
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad();
};

// Disables tape recording in scope (teacher passes, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
// b's shape must be a suffix of a's shape; b is tiled over the leading dims.
Tensor add_broadcast(const Tensor& a, const Tensor& b);
// x's shape must be a suffix of `full`; repeats x over the new leading dims.
Tensor broadcast_to(const Tensor& x, const Shape& full);

// ---- linear algebra ----
// a: (..., m, k), b: (k, n) or (..., k, n) with identical leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// a: (..., m, k), b: (..., n, k) -> (..., m, n); computes a @ b^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);

// ---- nonlinearities / norms ----
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);
Tensor softmax_lastdim(const Tensor& x);
Tensor log_op(const Tensor& x);

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- fused losses ----
// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> labels);
// Mean over rows of -sum_k target_k * log softmax(logits/tau)_k.
// `target_probs` is treated as constant.
Tensor soft_cross_entropy_sharpen(const Tensor& logits,
                                  std::span<const double> target_probs,
                                  double tau);
// Mean over rows of -sum_k target_k * log p_k; `p` varies, target constant.
Tensor cross_entropy_probs(std::span<const double> target_probs,
                           const Tensor& p);

// Sum over all rows (last dim = vector) of 2 - 2*cos(u_row, v_row).
// v is treated as constant.
Tensor cosine_align_sum(const Tensor& u, std::span<const double> v_const);
// u: (..., p, K). Sum over leading blocks and unordered row pairs j < k of
// 1 - cos(u_j, u_k).
Tensor cosine_diversity_sum(const Tensor& u);

// Numeric guard used in all cosine denominators.
inline constexpr double kCosineEps = 1e-12;

}  // namespace ptta::ad
