#include "ptta/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace ptta::ad {

namespace {

thread_local bool g_grad_enabled = true;

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic,
                                                   Eigen::RowMajor>>;

NodePtr make_value_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

bool want_tape(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument("tensor: " + msg);
}

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;
constexpr double kLogFloor = 1e-300;

std::int64_t leading_product(const Shape& s, int upto) {
  std::int64_t p = 1;
  for (int i = 0; i < upto; ++i) p *= s[i];
  return p;
}

}  // namespace

std::int64_t numel(const Shape& s) {
  std::int64_t p = 1;
  for (const int d : s) p *= d;
  return p;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

void Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = make_value_node(shape, std::vector<double>(numel(shape), 0.0));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = make_value_node(shape, std::vector<double>(numel(shape), v));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  check(numel(shape) == static_cast<std::int64_t>(data.size()),
        "from_data: shape " + shape_str(shape) + " does not match data size");
  auto n = make_value_node(std::move(shape), std::move(data));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
int Tensor::dim(int i) const { return node_->shape[i]; }
std::int64_t Tensor::size() const { return node_->size(); }

std::span<const double> Tensor::data() const {
  return {node_->value.data(), node_->value.size()};
}

std::span<double> Tensor::raw() {
  return {node_->value.data(), node_->value.size()};
}

std::span<const double> Tensor::grad() const {
  return {node_->grad.data(), node_->grad.size()};
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) { node_->requires_grad = rg; }

void Tensor::zero_grad() {
  // Releases the buffer instead of zero-filling so has_grad() reports
  // whether the parameter took part in the last backward pass; optimizers
  // rely on that to skip parameters outside the step's graph.
  if (node_) node_->grad.clear();
}

double Tensor::item() const {
  check(size() == 1, "item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const {
  return from_data(node_->shape, node_->value, false);
}

Tensor Tensor::clone() const {
  return from_data(node_->shape, node_->value, node_->requires_grad);
}

void Tensor::backward() const {
  check(node_ != nullptr, "backward() on empty tensor");
  check(size() == 1, "backward() root must be scalar");
  if (!node_->requires_grad) return;

  // iterative post-order DFS over the recorded tape
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      Node* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto n = make_value_node(a.shape(), std::move(out));
  if (want_tape({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    n->backward_fn = [pa = a.node(), pb = b.node()](Node& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i];
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<double> out(a.size());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto n = make_value_node(a.shape(), std::move(out));
  if (want_tape({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    n->backward_fn = [pa = a.node(), pb = b.node()](Node& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] -= self.grad[i];
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<double> out(a.size());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto n = make_value_node(a.shape(), std::move(out));
  if (want_tape({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    n->backward_fn = [pa = a.node(), pb = b.node()](Node& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i] * pa->value[i];
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  auto n = make_value_node(x.shape(), std::move(out));
  if (want_tape({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    n->backward_fn = [px = x.node(), c](Node& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        px->grad[i] += self.grad[i] * c;
    };
  }
  return Tensor(std::move(n));
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  check(sb.size() <= sa.size() &&
            std::equal(sb.rbegin(), sb.rend(), sa.rbegin()),
        "add_broadcast: " + shape_str(sb) + " is not a suffix of " +
            shape_str(sa));
  const std::int64_t nb = b.size();
  std::vector<double> out(a.size());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = av[i] + bv[i % nb];
  auto n = make_value_node(sa, std::move(out));
  if (want_tape({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    n->backward_fn = [pa = a.node(), pb = b.node(), nb](Node& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i % nb] += self.grad[i];
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor broadcast_to(const Tensor& x, const Shape& full) {
  const Shape& sx = x.shape();
  check(sx.size() <= full.size() &&
            std::equal(sx.rbegin(), sx.rend(), full.rbegin()),
        "broadcast_to: " + shape_str(sx) + " is not a suffix of " +
            shape_str(full));
  const std::int64_t nx = x.size();
  const std::int64_t nf = numel(full);
  std::vector<double> out(nf);
  const auto xv = x.data();
  for (std::int64_t i = 0; i < nf; ++i) out[i] = xv[i % nx];
  auto n = make_value_node(full, std::move(out));
  if (want_tape({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    n->backward_fn = [px = x.node(), nx](Node& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        px->grad[i % nx] += self.grad[i];
    };
  }
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

struct MatmulDims {
  std::int64_t batch;
  int m, k, n;
  bool b_batched;
};

MatmulDims matmul_dims(const Shape& sa, const Shape& sb, bool transpose_b) {
  check(sa.size() >= 2, "matmul: lhs rank < 2");
  check(sb.size() >= 2, "matmul: rhs rank < 2");
  MatmulDims d{};
  d.m = sa[sa.size() - 2];
  d.k = sa[sa.size() - 1];
  const int rb0 = sb[sb.size() - 2];
  const int rb1 = sb[sb.size() - 1];
  const int bk = transpose_b ? rb1 : rb0;
  d.n = transpose_b ? rb0 : rb1;
  check(bk == d.k, "matmul: inner dims " + std::to_string(d.k) + " vs " +
                       std::to_string(bk));
  d.batch = leading_product(sa, static_cast<int>(sa.size()) - 2);
  d.b_batched = sb.size() > 2;
  if (d.b_batched) {
    const std::int64_t bb = leading_product(sb, static_cast<int>(sb.size()) - 2);
    check(bb == d.batch, "matmul: leading dims differ");
    check(std::equal(sa.begin(), sa.end() - 2, sb.begin()),
          "matmul: leading shape mismatch");
  }
  return d;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool transpose_b) {
  const MatmulDims d = matmul_dims(a.shape(), b.shape(), transpose_b);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(d.n);
  std::vector<double> out(numel(out_shape));

  const double* pa = a.data().data();
  const double* pb = b.data().data();
  const std::int64_t a_stride = static_cast<std::int64_t>(d.m) * d.k;
  const std::int64_t b_stride =
      d.b_batched ? static_cast<std::int64_t>(d.k) * d.n : 0;
  const std::int64_t c_stride = static_cast<std::int64_t>(d.m) * d.n;

  for (std::int64_t i = 0; i < d.batch; ++i) {
    ConstMatMap A(pa + i * a_stride, d.m, d.k);
    MatMap C(out.data() + i * c_stride, d.m, d.n);
    if (!transpose_b) {
      ConstMatMap B(pb + i * b_stride, d.k, d.n);
      C.noalias() = A * B;
    } else {
      ConstMatMap B(pb + i * b_stride, d.n, d.k);
      C.noalias() = A * B.transpose();
    }
  }

  auto node = make_value_node(out_shape, std::move(out));
  if (want_tape({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    node->backward_fn = [pa_n = a.node(), pb_n = b.node(), d, a_stride,
                         b_stride, c_stride, transpose_b](Node& self) {
      const double* g = self.grad.data();
      if (pa_n->requires_grad) {
        pa_n->ensure_grad();
        for (std::int64_t i = 0; i < d.batch; ++i) {
          ConstMatMap G(g + i * c_stride, d.m, d.n);
          MatMap dA(pa_n->grad.data() + i * a_stride, d.m, d.k);
          if (!transpose_b) {
            ConstMatMap B(pb_n->value.data() + i * b_stride, d.k, d.n);
            dA.noalias() += G * B.transpose();
          } else {
            ConstMatMap B(pb_n->value.data() + i * b_stride, d.n, d.k);
            dA.noalias() += G * B;
          }
        }
      }
      if (pb_n->requires_grad) {
        pb_n->ensure_grad();
        for (std::int64_t i = 0; i < d.batch; ++i) {
          ConstMatMap G(g + i * c_stride, d.m, d.n);
          ConstMatMap A(pa_n->value.data() + i * a_stride, d.m, d.k);
          if (!transpose_b) {
            MatMap dB(pb_n->grad.data() + i * b_stride, d.k, d.n);
            dB.noalias() += A.transpose() * G;
          } else {
            MatMap dB(pb_n->grad.data() + i * b_stride, d.n, d.k);
            dB.noalias() += G.transpose() * A;
          }
        }
      }
    };
  }
  return Tensor(std::move(node));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  return matmul_impl(a, b, false);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  return matmul_impl(a, b, true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_broadcast(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
  check(numel(new_shape) == x.size(), "reshape: element count mismatch " +
                                          shape_str(x.shape()) + " -> " +
                                          shape_str(new_shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  auto n = make_value_node(std::move(new_shape), std::move(out));
  if (want_tape({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    n->backward_fn = [px = x.node()](Node& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        px->grad[i] += self.grad[i];
    };
  }
  return Tensor(std::move(n));
}

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// map from output flat index to input flat index for a permutation
std::vector<std::int64_t> permute_index_map(const Shape& in_shape,
                                            const std::vector<int>& perm) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_strides = row_major_strides(in_shape);
  const auto out_strides = row_major_strides(out_shape);
  const std::int64_t n = numel(in_shape);
  std::vector<std::int64_t> map(n);
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t rem = o;
    std::int64_t in_idx = 0;
    for (int i = 0; i < r; ++i) {
      const std::int64_t coord = rem / out_strides[i];
      rem %= out_strides[i];
      in_idx += coord * in_strides[perm[i]];
    }
    map[o] = in_idx;
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  check(static_cast<int>(perm.size()) == r, "permute: rank mismatch");
  std::vector<bool> seen(r, false);
  for (const int p : perm) {
    check(p >= 0 && p < r && !seen[p], "permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  auto map = permute_index_map(x.shape(), perm);
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::int64_t o = 0; o < x.size(); ++o) out[o] = xv[map[o]];
  auto n = make_value_node(std::move(out_shape), std::move(out));
  if (want_tape({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    n->backward_fn = [px = x.node(), map = std::move(map)](Node& self) {
      px->ensure_grad();
      for (std::size_t o = 0; o < self.grad.size(); ++o)
        px->grad[map[o]] += self.grad[o];
    };
  }
  return Tensor(std::move(n));
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  check(!xs.empty(), "concat: no inputs");
  const int r = xs[0].rank();
  check(axis >= 0 && axis < r, "concat: axis out of range");
  int axis_total = 0;
  for (const Tensor& t : xs) {
    check(t.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis)
        check(t.dim(i) == xs[0].dim(i), "concat: non-axis dim mismatch");
    }
    axis_total += t.dim(axis);
  }
  Shape out_shape = xs[0].shape();
  out_shape[axis] = axis_total;
  const std::int64_t outer = leading_product(out_shape, axis);
  std::int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];

  std::vector<double> out(numel(out_shape));
  std::int64_t offset_rows = 0;
  for (const Tensor& t : xs) {
    const std::int64_t rows = t.dim(axis);
    const auto tv = t.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      const double* src = tv.data() + o * rows * inner;
      double* dst =
          out.data() + (o * axis_total + offset_rows) * inner;
      std::copy(src, src + rows * inner, dst);
    }
    offset_rows += rows;
  }

  auto n = make_value_node(out_shape, std::move(out));
  bool any_rg = false;
  if (g_grad_enabled) {
    for (const Tensor& t : xs) any_rg = any_rg || t.requires_grad();
  }
  if (any_rg) {
    n->requires_grad = true;
    std::vector<NodePtr> parents;
    std::vector<std::int64_t> rows_of;
    for (const Tensor& t : xs) {
      parents.push_back(t.node());
      rows_of.push_back(t.dim(axis));
    }
    n->parents = parents;
    n->backward_fn = [parents, rows_of, outer, inner,
                      axis_total](Node& self) {
      std::int64_t offset_rows = 0;
      for (std::size_t pi = 0; pi < parents.size(); ++pi) {
        const auto& p = parents[pi];
        const std::int64_t rows = rows_of[pi];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src =
                self.grad.data() + (o * axis_total + offset_rows) * inner;
            double* dst = p->grad.data() + o * rows * inner;
            for (std::int64_t i = 0; i < rows * inner; ++i) dst[i] += src[i];
          }
        }
        offset_rows += rows;
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  const int r = x.rank();
  check(axis >= 0 && axis < r, "slice: axis out of range");
  check(start >= 0 && len >= 0 && start + len <= x.dim(axis),
        "slice: range out of bounds");
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  const std::int64_t outer = leading_product(x.shape(), axis);
  std::int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const std::int64_t axis_in = x.dim(axis);

  std::vector<double> out(numel(out_shape));
  const auto xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    const double* src = xv.data() + (o * axis_in + start) * inner;
    std::copy(src, src + len * inner, out.data() + o * len * inner);
  }
  auto n = make_value_node(std::move(out_shape), std::move(out));
  if (want_tape({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    n->backward_fn = [px = x.node(), outer, inner, axis_in, start,
                      len](Node& self) {
      px->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = self.grad.data() + o * len * inner;
        double* dst = px->grad.data() + (o * axis_in + start) * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    };
  }
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// nonlinearities / norms
// ---------------------------------------------------------------------------

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  }
  auto n = make_value_node(x.shape(), std::move(out));
  if (want_tape({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    n->backward_fn = [px = x.node()](Node& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double v = px->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        px->grad[i] += self.grad[i] * (cdf + v * pdf);
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const int d = x.dim(x.rank() - 1);
  check(gamma.rank() == 1 && gamma.dim(0) == d, "layer_norm: gamma shape");
  check(beta.rank() == 1 && beta.dim(0) == d, "layer_norm: beta shape");
  const std::int64_t rows = x.size() / d;

  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(rows);
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= d;
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (int j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto n = make_value_node(x.shape(), std::move(out));
  if (want_tape({&x, &gamma, &beta})) {
    n->requires_grad = true;
    n->parents = {x.node(), gamma.node(), beta.node()};
    n->backward_fn = [px = x.node(), pg = gamma.node(), pb = beta.node(),
                      xhat = std::move(xhat), rstd = std::move(rstd), rows,
                      d](Node& self) {
      if (px->requires_grad) px->ensure_grad();
      if (pg->requires_grad) pg->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gy = self.grad.data() + r * d;
        const double* xh = xhat.data() + r * d;
        if (pg->requires_grad || pb->requires_grad) {
          for (int j = 0; j < d; ++j) {
            if (pg->requires_grad) pg->grad[j] += gy[j] * xh[j];
            if (pb->requires_grad) pb->grad[j] += gy[j];
          }
        }
        if (px->requires_grad) {
          double mean_g = 0.0;
          double mean_gx = 0.0;
          for (int j = 0; j < d; ++j) {
            const double g = gy[j] * pg->value[j];
            mean_g += g;
            mean_gx += g * xh[j];
          }
          mean_g /= d;
          mean_gx /= d;
          double* dx = px->grad.data() + r * d;
          for (int j = 0; j < d; ++j) {
            const double g = gy[j] * pg->value[j];
            dx[j] += (g - mean_g - xh[j] * mean_gx) * rstd[r];
          }
        }
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor softmax_lastdim(const Tensor& x) {
  const int d = x.dim(x.rank() - 1);
  const std::int64_t rows = x.size() / d;
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double* yr = out.data() + r * d;
    double m = xr[0];
    for (int j = 1; j < d; ++j) m = std::max(m, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - m);
      sum += yr[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < d; ++j) yr[j] *= inv;
  }
  auto n = make_value_node(x.shape(), std::move(out));
  if (want_tape({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    n->backward_fn = [px = x.node(), rows, d](Node& self) {
      px->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * d;
        const double* gy = self.grad.data() + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += gy[j] * y[j];
        double* dx = px->grad.data() + r * d;
        for (int j = 0; j < d; ++j) dx[j] += y[j] * (gy[j] - dot);
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor log_op(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = std::log(xv[i]);
  auto n = make_value_node(x.shape(), std::move(out));
  if (want_tape({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    n->backward_fn = [px = x.node()](Node& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        px->grad[i] += self.grad[i] / px->value[i];
    };
  }
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (const double v : x.data()) s += v;
  auto n = make_value_node({1}, {s});
  if (want_tape({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    n->backward_fn = [px = x.node()](Node& self) {
      px->ensure_grad();
      const double g = self.grad[0];
      for (auto& gv : px->grad) gv += g;
    };
  }
  return Tensor(std::move(n));
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// fused losses
// ---------------------------------------------------------------------------

Tensor cross_entropy_logits(const Tensor& logits,
                            std::span<const int> labels) {
  const int c = logits.dim(logits.rank() - 1);
  const std::int64_t rows = logits.size() / c;
  check(static_cast<std::int64_t>(labels.size()) == rows,
        "cross_entropy_logits: label count mismatch");
  std::vector<double> probs(logits.size());
  const auto zv = logits.data();
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    check(labels[r] >= 0 && labels[r] < c,
          "cross_entropy_logits: label out of range");
    const double* z = zv.data() + r * c;
    double* p = probs.data() + r * c;
    double m = z[0];
    for (int j = 1; j < c; ++j) m = std::max(m, z[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      p[j] = std::exp(z[j] - m);
      sum += p[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < c; ++j) p[j] *= inv;
    total += (m + std::log(sum)) - z[labels[r]];
  }
  auto n = make_value_node({1}, {total / static_cast<double>(rows)});
  if (want_tape({&logits})) {
    n->requires_grad = true;
    n->parents = {logits.node()};
    std::vector<int> labels_copy(labels.begin(), labels.end());
    n->backward_fn = [pz = logits.node(), probs = std::move(probs),
                      labels = std::move(labels_copy), rows, c](Node& self) {
      pz->ensure_grad();
      const double g = self.grad[0] / static_cast<double>(rows);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* p = probs.data() + r * c;
        double* dz = pz->grad.data() + r * c;
        for (int j = 0; j < c; ++j) dz[j] += g * p[j];
        dz[labels[r]] -= g;
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor soft_cross_entropy_sharpen(const Tensor& logits,
                                  std::span<const double> target_probs,
                                  double tau) {
  check(tau > 0.0, "soft_cross_entropy_sharpen: tau must be positive");
  const int k = logits.dim(logits.rank() - 1);
  const std::int64_t rows = logits.size() / k;
  check(static_cast<std::int64_t>(target_probs.size()) == logits.size(),
        "soft_cross_entropy_sharpen: target size mismatch");
  std::vector<double> probs(logits.size());
  const auto zv = logits.data();
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* z = zv.data() + r * k;
    const double* t = target_probs.data() + r * k;
    double* p = probs.data() + r * k;
    double m = z[0] / tau;
    for (int j = 1; j < k; ++j) m = std::max(m, z[j] / tau);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      p[j] = std::exp(z[j] / tau - m);
      sum += p[j];
    }
    const double lse = m + std::log(sum);
    const double inv = 1.0 / sum;
    for (int j = 0; j < k; ++j) {
      p[j] *= inv;
      total += t[j] * (lse - z[j] / tau);
    }
  }
  auto n = make_value_node({1}, {total / static_cast<double>(rows)});
  if (want_tape({&logits})) {
    n->requires_grad = true;
    n->parents = {logits.node()};
    std::vector<double> t_copy(target_probs.begin(), target_probs.end());
    n->backward_fn = [pz = logits.node(), probs = std::move(probs),
                      t = std::move(t_copy), rows, k, tau](Node& self) {
      pz->ensure_grad();
      const double g = self.grad[0] / (static_cast<double>(rows) * tau);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* p = probs.data() + r * k;
        const double* tr = t.data() + r * k;
        double tsum = 0.0;
        for (int j = 0; j < k; ++j) tsum += tr[j];
        double* dz = pz->grad.data() + r * k;
        for (int j = 0; j < k; ++j) dz[j] += g * (p[j] * tsum - tr[j]);
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor cross_entropy_probs(std::span<const double> target_probs,
                           const Tensor& p) {
  const int k = p.dim(p.rank() - 1);
  const std::int64_t rows = p.size() / k;
  check(static_cast<std::int64_t>(target_probs.size()) == p.size(),
        "cross_entropy_probs: target size mismatch");
  const auto pv = p.data();
  double total = 0.0;
  for (std::int64_t i = 0; i < p.size(); ++i) {
    total -= target_probs[i] * std::log(std::max(pv[i], kLogFloor));
  }
  auto n = make_value_node({1}, {total / static_cast<double>(rows)});
  if (want_tape({&p})) {
    n->requires_grad = true;
    n->parents = {p.node()};
    std::vector<double> t_copy(target_probs.begin(), target_probs.end());
    n->backward_fn = [pp = p.node(), t = std::move(t_copy), rows](Node& self) {
      pp->ensure_grad();
      const double g = self.grad[0] / static_cast<double>(rows);
      for (std::size_t i = 0; i < pp->grad.size(); ++i)
        pp->grad[i] -= g * t[i] / std::max(pp->value[i], kLogFloor);
    };
  }
  return Tensor(std::move(n));
}

namespace {

struct CosineParts {
  double dot, nu, nv, denom, cos;
};

CosineParts cosine_parts(const double* u, const double* v, int k) {
  CosineParts c{};
  for (int j = 0; j < k; ++j) {
    c.dot += u[j] * v[j];
    c.nu += u[j] * u[j];
    c.nv += v[j] * v[j];
  }
  c.nu = std::sqrt(c.nu);
  c.nv = std::sqrt(c.nv);
  c.denom = c.nu * c.nv + kCosineEps;
  c.cos = c.dot / c.denom;
  return c;
}

// d cos / d u, with the norm in the gradient floored to avoid 0/0
void cosine_grad_u(const CosineParts& c, const double* u, const double* v,
                   int k, double coeff, double* du) {
  const double nu_safe = std::max(c.nu, kCosineEps);
  const double a = 1.0 / c.denom;
  const double b = c.dot * c.nv / (nu_safe * c.denom * c.denom);
  for (int j = 0; j < k; ++j) du[j] += coeff * (v[j] * a - u[j] * b);
}

}  // namespace

Tensor cosine_align_sum(const Tensor& u, std::span<const double> v_const) {
  const int k = u.dim(u.rank() - 1);
  const std::int64_t rows = u.size() / k;
  check(static_cast<std::int64_t>(v_const.size()) == u.size(),
        "cosine_align_sum: size mismatch");
  const auto uv = u.data();
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto c = cosine_parts(uv.data() + r * k, v_const.data() + r * k, k);
    total += 2.0 - 2.0 * c.cos;
  }
  auto n = make_value_node({1}, {total});
  if (want_tape({&u})) {
    n->requires_grad = true;
    n->parents = {u.node()};
    std::vector<double> v_copy(v_const.begin(), v_const.end());
    n->backward_fn = [pu = u.node(), v = std::move(v_copy), rows,
                      k](Node& self) {
      pu->ensure_grad();
      const double g = self.grad[0];
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* ur = pu->value.data() + r * k;
        const double* vr = v.data() + r * k;
        const auto c = cosine_parts(ur, vr, k);
        cosine_grad_u(c, ur, vr, k, -2.0 * g, pu->grad.data() + r * k);
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor cosine_diversity_sum(const Tensor& u) {
  check(u.rank() >= 2, "cosine_diversity_sum: rank < 2");
  const int k = u.dim(u.rank() - 1);
  const int p = u.dim(u.rank() - 2);
  const std::int64_t blocks = u.size() / (static_cast<std::int64_t>(p) * k);
  const auto uv = u.data();
  double total = 0.0;
  for (std::int64_t b = 0; b < blocks; ++b) {
    const double* base = uv.data() + b * p * k;
    for (int j = 0; j < p; ++j) {
      for (int l = j + 1; l < p; ++l) {
        const auto c = cosine_parts(base + j * k, base + l * k, k);
        total += 1.0 - c.cos;
      }
    }
  }
  auto n = make_value_node({1}, {total});
  if (want_tape({&u})) {
    n->requires_grad = true;
    n->parents = {u.node()};
    n->backward_fn = [pu = u.node(), blocks, p, k](Node& self) {
      pu->ensure_grad();
      const double g = self.grad[0];
      for (std::int64_t b = 0; b < blocks; ++b) {
        const double* base = pu->value.data() + b * p * k;
        double* gbase = pu->grad.data() + b * p * k;
        for (int j = 0; j < p; ++j) {
          for (int l = j + 1; l < p; ++l) {
            const double* uj = base + j * k;
            const double* ul = base + l * k;
            const auto c = cosine_parts(uj, ul, k);
            cosine_grad_u(c, uj, ul, k, -g, gbase + j * k);
            // symmetric term for the second row
            const CosineParts cr{c.dot, c.nv, c.nu, c.denom, c.cos};
            cosine_grad_u(cr, ul, uj, k, -g, gbase + l * k);
          }
        }
      }
    };
  }
  return Tensor(std::move(n));
}

}  // namespace ptta::ad
