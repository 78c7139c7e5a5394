#include "doctest.h"
#include "ptta/rng.hpp"
#include "ptta/tensor.hpp"

#include <cmath>
#include <functional>
#include <vector>

using namespace ptta::ad;
using ptta::RngStream;

namespace {

Tensor randn(RngStream& rng, Shape shape, double stddev = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

// Central finite differences against the recorded tape, over every element
// of every input. The loss builder must be a pure function of the inputs.
void check_grads(std::vector<Tensor> inputs,
                 const std::function<Tensor(std::vector<Tensor>&)>& loss_fn,
                 double tol = 1e-6, double h = 1e-5) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor loss = loss_fn(inputs);
  REQUIRE(loss.size() == 1);
  loss.backward();

  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    REQUIRE(inputs[ti].has_grad());
    const auto analytic = inputs[ti].grad();
    for (std::int64_t i = 0; i < inputs[ti].size(); ++i) {
      const double saved = inputs[ti].raw()[i];
      double fp, fm;
      {
        NoGradGuard ng;
        inputs[ti].raw()[i] = saved + h;
        fp = loss_fn(inputs).item();
        inputs[ti].raw()[i] = saved - h;
        fm = loss_fn(inputs).item();
      }
      inputs[ti].raw()[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double denom =
          std::max({1.0, std::abs(analytic[i]), std::abs(fd)});
      const double rel = std::abs(analytic[i] - fd) / denom;
      INFO("input ", ti, " element ", i, " analytic ", analytic[i], " fd ",
           fd);
      CHECK(rel < tol);
    }
  }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  RngStream rng(101);
  auto a = randn(rng, {3, 4});
  auto b = randn(rng, {3, 4});
  check_grads({a, b}, [](std::vector<Tensor>& in) {
    Tensor s = add(in[0], in[1]);
    Tensor d = sub(in[0], scale(in[1], 0.7));
    return mean_all(mul(s, d));
  });
}

TEST_CASE("broadcast ops match finite differences") {
  RngStream rng(102);
  auto a = randn(rng, {2, 3, 4});
  auto b = randn(rng, {4});
  check_grads({a, b}, [](std::vector<Tensor>& in) {
    return mean_all(mul(add_broadcast(in[0], in[1]),
                        broadcast_to(in[1], in[0].shape())));
  });
}

TEST_CASE("matmul gradients, shared and batched rhs") {
  RngStream rng(103);
  SUBCASE("rank-2 by rank-2") {
    auto a = randn(rng, {3, 5});
    auto b = randn(rng, {5, 4});
    check_grads({a, b}, [](std::vector<Tensor>& in) {
      return mean_all(matmul(in[0], in[1]));
    });
  }
  SUBCASE("batched lhs, shared rhs") {
    auto a = randn(rng, {2, 3, 5});
    auto b = randn(rng, {5, 4});
    check_grads({a, b}, [](std::vector<Tensor>& in) {
      Tensor c = matmul(in[0], in[1]);
      return mean_all(mul(c, c));
    });
  }
  SUBCASE("batched lhs, batched rhs") {
    auto a = randn(rng, {2, 3, 5});
    auto b = randn(rng, {2, 5, 4});
    check_grads({a, b}, [](std::vector<Tensor>& in) {
      return mean_all(matmul(in[0], in[1]));
    });
  }
}

TEST_CASE("matmul_nt gradients") {
  RngStream rng(104);
  SUBCASE("shared rhs") {
    auto a = randn(rng, {3, 5});
    auto b = randn(rng, {4, 5});
    check_grads({a, b}, [](std::vector<Tensor>& in) {
      return mean_all(matmul_nt(in[0], in[1]));
    });
  }
  SUBCASE("batched both") {
    auto a = randn(rng, {2, 3, 5});
    auto b = randn(rng, {2, 4, 5});
    check_grads({a, b}, [](std::vector<Tensor>& in) {
      Tensor c = matmul_nt(in[0], in[1]);
      return mean_all(mul(c, c));
    });
  }
}

TEST_CASE("matmul value oracle") {
  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  auto c = matmul(a, b);
  CHECK(c.data()[0] == doctest::Approx(19));
  CHECK(c.data()[1] == doctest::Approx(22));
  CHECK(c.data()[2] == doctest::Approx(43));
  CHECK(c.data()[3] == doctest::Approx(50));
  auto d = matmul_nt(a, b);
  CHECK(d.data()[0] == doctest::Approx(1 * 5 + 2 * 6));
  CHECK(d.data()[1] == doctest::Approx(1 * 7 + 2 * 8));
}

TEST_CASE("linear gradients") {
  RngStream rng(105);
  auto x = randn(rng, {2, 3, 5});
  auto w = randn(rng, {5, 4});
  auto b = randn(rng, {4});
  check_grads({x, w, b}, [](std::vector<Tensor>& in) {
    return mean_all(gelu(linear(in[0], in[1], in[2])));
  });
}

TEST_CASE("shape ops route gradients through index maps") {
  RngStream rng(106);
  SUBCASE("reshape and permute") {
    auto x = randn(rng, {2, 3, 4});
    check_grads({x}, [](std::vector<Tensor>& in) {
      Tensor p = permute(in[0], {1, 0, 2});
      Tensor r = reshape(p, {3, 8});
      return mean_all(mul(r, r));
    });
  }
  SUBCASE("permute value oracle") {
    auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto y = permute(x, {1, 0});
    CHECK(y.shape() == Shape{3, 2});
    const std::vector<double> want{1, 4, 2, 5, 3, 6};
    for (int i = 0; i < 6; ++i) CHECK(y.data()[i] == want[i]);
  }
  SUBCASE("concat and slice") {
    auto a = randn(rng, {2, 2, 3});
    auto b = randn(rng, {2, 4, 3});
    check_grads({a, b}, [](std::vector<Tensor>& in) {
      Tensor c = concat({in[0], in[1]}, 1);
      Tensor s = slice(c, 1, 1, 4);
      return mean_all(mul(s, s));
    });
  }
  SUBCASE("concat value oracle") {
    auto a = Tensor::from_data({1, 2}, {1, 2});
    auto b = Tensor::from_data({1, 3}, {3, 4, 5});
    auto c = concat({a, b}, 1);
    CHECK(c.shape() == Shape{1, 5});
    for (int i = 0; i < 5; ++i) CHECK(c.data()[i] == i + 1);
  }
}

TEST_CASE("gelu matches the erf form and its derivative") {
  auto x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  auto y = gelu(x);
  for (int i = 0; i < 3; ++i) {
    const double v = x.data()[i];
    const double want = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    CHECK(y.data()[i] == doctest::Approx(want).epsilon(1e-12));
  }
  RngStream rng(107);
  auto z = randn(rng, {4, 5});
  check_grads({z}, [](std::vector<Tensor>& in) {
    return sum_all(gelu(in[0]));
  });
}

TEST_CASE("layer_norm normalizes rows and backprops to all three inputs") {
  RngStream rng(108);
  auto x = randn(rng, {3, 6}, 2.0);
  auto g = randn(rng, {6});
  auto b = randn(rng, {6});

  auto y = layer_norm(x, Tensor::full({6}, 1.0), Tensor::zeros({6}));
  for (int r = 0; r < 3; ++r) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 6; ++j) mean += y.data()[r * 6 + j];
    mean /= 6;
    for (int j = 0; j < 6; ++j) {
      const double c = y.data()[r * 6 + j] - mean;
      var += c * c;
    }
    var /= 6;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
  }

  check_grads({x, g, b}, [](std::vector<Tensor>& in) {
    Tensor y = layer_norm(in[0], in[1], in[2]);
    return mean_all(mul(y, y));
  });
}

TEST_CASE("softmax rows sum to one and gradient is exact") {
  RngStream rng(109);
  auto x = randn(rng, {4, 7}, 3.0);
  auto y = softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) s += y.data()[r * 7 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto w = randn(rng, {4, 7});
  const std::vector<double> wfix(w.data().begin(), w.data().end());
  check_grads({x}, [&wfix](std::vector<Tensor>& in) {
    Tensor y = softmax_lastdim(in[0]);
    Tensor w = Tensor::from_data({4, 7}, wfix);
    return sum_all(mul(y, w));
  });
}

TEST_CASE("log gradient") {
  RngStream rng(110);
  auto x = randn(rng, {3, 4});
  check_grads({x}, [](std::vector<Tensor>& in) {
    return mean_all(log_op(softmax_lastdim(in[0])));
  });
}

TEST_CASE("cross_entropy_logits matches a naive oracle") {
  RngStream rng(111);
  auto z = randn(rng, {5, 6}, 2.0);
  std::vector<int> labels{0, 3, 5, 2, 1};

  double want = 0.0;
  for (int r = 0; r < 5; ++r) {
    double m = z.data()[r * 6];
    for (int j = 1; j < 6; ++j) m = std::max(m, z.data()[r * 6 + j]);
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += std::exp(z.data()[r * 6 + j] - m);
    want += m + std::log(s) - z.data()[r * 6 + labels[r]];
  }
  want /= 5;
  CHECK(cross_entropy_logits(z, labels).item() ==
        doctest::Approx(want).epsilon(1e-12));

  check_grads({z}, [&labels](std::vector<Tensor>& in) {
    return cross_entropy_logits(in[0], labels);
  });
}

TEST_CASE("soft cross entropy with sharpening matches oracle and FD") {
  RngStream rng(112);
  const int rows = 4, k = 5;
  auto z = randn(rng, {rows, k});
  std::vector<double> target(rows * k);
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      target[r * k + j] = rng.uniform() + 0.05;
      s += target[r * k + j];
    }
    for (int j = 0; j < k; ++j) target[r * k + j] /= s;
  }
  const double tau = 0.1;

  double want = 0.0;
  for (int r = 0; r < rows; ++r) {
    double m = z.data()[r * k] / tau;
    for (int j = 1; j < k; ++j) m = std::max(m, z.data()[r * k + j] / tau);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(z.data()[r * k + j] / tau - m);
    const double lse = m + std::log(s);
    for (int j = 0; j < k; ++j)
      want += target[r * k + j] * (lse - z.data()[r * k + j] / tau);
  }
  want /= rows;
  CHECK(soft_cross_entropy_sharpen(z, target, tau).item() ==
        doctest::Approx(want).epsilon(1e-12));

  check_grads(
      {z},
      [&target, tau](std::vector<Tensor>& in) {
        return soft_cross_entropy_sharpen(in[0], target, tau);
      },
      1e-5, 1e-6);
}

TEST_CASE("cross entropy against fixed target probabilities") {
  RngStream rng(113);
  const int rows = 3, k = 4;
  auto z = randn(rng, {rows, k});
  std::vector<double> target(rows * k, 1.0 / k);
  target[0] = 0.7;
  target[1] = 0.1;
  target[2] = 0.1;
  target[3] = 0.1;
  check_grads({z}, [&target](std::vector<Tensor>& in) {
    return cross_entropy_probs(target, softmax_lastdim(in[0]));
  });
}

TEST_CASE("cosine alignment loss endpoints and gradient") {
  auto u = Tensor::from_data({2, 3}, {1, 0, 0, 0, 2, 0});
  std::vector<double> v{2, 0, 0, 0, -1, 0};
  const double got = cosine_align_sum(u, v).item();
  CHECK(got == doctest::Approx(0.0 + 4.0).epsilon(1e-9));

  RngStream rng(114);
  auto x = randn(rng, {3, 8});
  std::vector<double> vr(24);
  for (auto& t : vr) t = rng.normal();
  check_grads({x}, [&vr](std::vector<Tensor>& in) {
    return cosine_align_sum(in[0], vr);
  });
}

TEST_CASE("cosine diversity counts unordered pairs and backprops") {
  auto u = Tensor::from_data({1, 2, 2}, {1, 0, 0, 1});
  CHECK(cosine_diversity_sum(u).item() == doctest::Approx(1.0).epsilon(1e-9));
  auto w = Tensor::from_data({1, 2, 2}, {1, 0, 3, 0});
  CHECK(cosine_diversity_sum(w).item() == doctest::Approx(0.0).epsilon(1e-9));

  RngStream rng(115);
  auto x = randn(rng, {2, 3, 6});
  check_grads({x}, [](std::vector<Tensor>& in) {
    return cosine_diversity_sum(in[0]);
  });
}

TEST_CASE("grad accumulates across backward calls and zero_grad resets") {
  auto x = Tensor::from_data({2}, {3.0, -1.0}, true);
  auto loss = [&] { return sum_all(mul(x, x)); };
  loss().backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  loss().backward();
  CHECK(x.grad()[0] == doctest::Approx(12.0));
  x.zero_grad();
  loss().backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(-2.0));
}

TEST_CASE("NoGradGuard suppresses tape recording") {
  auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
  {
    NoGradGuard ng;
    auto y = sum_all(mul(x, x));
    CHECK_FALSE(y.requires_grad());
  }
  auto y = sum_all(mul(x, x));
  CHECK(y.requires_grad());
}

TEST_CASE("detach cuts the graph") {
  auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
  auto d = x.detach();
  CHECK_FALSE(d.requires_grad());
  auto y = sum_all(mul(d, d));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("reused subexpression accumulates both paths") {
  auto x = Tensor::from_data({1}, {2.0}, true);
  auto y = mul(x, x);
  auto z = add(y, y);
  sum_all(z).backward();
  CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("shape mismatches throw") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS((void)add(a, b), std::invalid_argument);
  CHECK_THROWS_AS((void)matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS((void)reshape(a, {4, 2}), std::invalid_argument);
  CHECK_THROWS_AS((void)slice(a, 1, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS((void)Tensor::from_data({2}, {1.0, 2.0, 3.0}),
                  std::invalid_argument);
}
