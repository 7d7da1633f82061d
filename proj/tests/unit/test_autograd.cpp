// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "idref/autograd.hpp"
#include "idref/layers.hpp"
#include "idref/optim.hpp"
#include "support/gradcheck.hpp"

using namespace idref;
using namespace idref::nn;
using idref::testing::numeric_grad;
using idref::testing::random_tensor;
using idref::testing::relative_error;

namespace {

using OpFn = std::function<Var(const std::vector<Var>&)>;

// Checks every input's analytic gradient of sum(op(inputs) * R) against
// central differences.
double worst_grad_error(std::vector<Var> inputs, const OpFn& op, std::uint64_t seed = 1, float h = 1e-2f) {
  std::mt19937_64 rng(seed);
  Var probe = op(inputs);
  const Tensor r = random_tensor(probe->value.shape(), rng);
  auto loss_value = [&]() {
    Var out = op(inputs);
    double acc = 0.0;
    for (std::size_t i = 0; i < out->value.numel(); ++i) acc += static_cast<double>(out->value[i]) * r[i];
    return acc;
  };
  for (auto& in : inputs) in->grad = Tensor();
  Var out = op(inputs);
  backward(out, r);
  double worst = 0.0;
  for (auto& in : inputs) {
    if (!in->requires_grad) continue;
    Tensor analytic = in->has_grad() ? in->grad : Tensor(in->value.shape());
    Tensor numeric = numeric_grad(in, loss_value, h);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

Var rp(const Shape& s, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  return parameter(random_tensor(s, rng, lo, hi));
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  std::mt19937_64 rng(3);
  CHECK(worst_grad_error({rp({2, 3, 4}, rng), rp({2, 3, 4}, rng)},
                         [](auto& v) { return mul(add(v[0], v[1]), sub(v[0], scale(v[1], 0.5f))); }) < 1e-3);
  CHECK(worst_grad_error({rp({3, 5}, rng)}, [](auto& v) { return silu(v[0]); }) < 1e-3);
  CHECK(worst_grad_error({rp({3, 5}, rng)}, [](auto& v) { return sigmoid(v[0]); }) < 1e-3);
  CHECK(worst_grad_error({rp({3, 5}, rng)}, [](auto& v) { return tanh(v[0]); }) < 1e-3);
  CHECK(worst_grad_error({rp({3, 5}, rng, 0.5f, 2.0f)}, [](auto& v) { return log(v[0]); }) < 1e-3);
  CHECK(worst_grad_error({rp({3, 5}, rng)}, [](auto& v) { return square(add_scalar(v[0], 0.3f)); }) < 1e-3);
}

TEST_CASE("reductions match finite differences") {
  std::mt19937_64 rng(4);
  CHECK(worst_grad_error({rp({4, 6}, rng), rp({4, 6}, rng)}, [](auto& v) { return mse_mean(v[0], v[1]); }) < 1e-3);
  CHECK(worst_grad_error({rp({4, 6}, rng)}, [](auto& v) { return mean(square(v[0])); }) < 1e-3);
  CHECK(worst_grad_error({rp({4, 6}, rng)}, [](auto& v) { return sum(v[0]); }) < 1e-3);
}

TEST_CASE("conv2d gradients for stride 1, stride 2 and 1x1") {
  std::mt19937_64 rng(5);
  for (int stride : {1, 2}) {
    auto x = rp({2, 3, 6, 6}, rng);
    auto w = rp({4, 3, 3, 3}, rng);
    auto b = rp({4}, rng);
    CHECK(worst_grad_error({x, w, b}, [stride](auto& v) { return conv2d(v[0], v[1], v[2], stride, 1); }) < 1e-3);
  }
  auto x = rp({2, 3, 4, 4}, rng);
  auto w = rp({5, 3, 1, 1}, rng);
  CHECK(worst_grad_error({x, w}, [](auto& v) { return conv2d(v[0], v[1], nullptr, 1, 0); }) < 1e-3);
}

TEST_CASE("conv2d forward equals a direct loop") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  Var y = conv2d(constant(x), constant(w), constant(b), 2, 1);
  REQUIRE(y->value.shape() == Shape{1, 3, 3, 3});
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double acc = b[static_cast<std::size_t>(o)];
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              acc += x.at(0, c, iy, ix) * w.at(o, c, ky, kx);
            }
        CHECK(y->value.at(0, o, oy, ox) == doctest::Approx(acc).epsilon(1e-5));
      }
}

TEST_CASE("normalization gradients") {
  std::mt19937_64 rng(7);
  CHECK(worst_grad_error({rp({2, 4, 3, 3}, rng), rp({4}, rng), rp({4}, rng)},
                         [](auto& v) { return group_norm(v[0], 2, v[1], v[2]); }) < 2e-3);
  CHECK(worst_grad_error({rp({3, 5, 6}, rng), rp({6}, rng), rp({6}, rng)},
                         [](auto& v) { return layer_norm(v[0], v[1], v[2]); }) < 2e-3);
  CHECK(worst_grad_error({rp({2, 3, 4, 4}, rng)}, [](auto& v) { return instance_standardize(v[0]); }) < 2e-3);
  CHECK(worst_grad_error({rp({2, 3, 2, 2}, rng), rp({2, 3}, rng), rp({2, 3}, rng)},
                         [](auto& v) { return add_channel(mul_channel(v[0], v[1]), v[2]); }) < 1e-3);
}

TEST_CASE("layout and resampling gradients") {
  std::mt19937_64 rng(8);
  CHECK(worst_grad_error({rp({2, 3, 2, 4}, rng)}, [](auto& v) { return upsample2x(v[0]); }) < 1e-3);
  CHECK(worst_grad_error({rp({2, 3, 4, 4}, rng)}, [](auto& v) { return avg_pool2x(v[0]); }) < 1e-3);
  CHECK(worst_grad_error({rp({2, 3, 4, 4}, rng)}, [](auto& v) { return global_avg_pool(v[0]); }) < 1e-3);
  CHECK(worst_grad_error({rp({2, 3, 2, 4}, rng)},
                         [](auto& v) { return tokens_to_nchw(nchw_to_tokens(v[0]), 2, 4); }) < 1e-3);
  CHECK(worst_grad_error({rp({4, 3}, rng)}, [](auto& v) { return slice0(v[0], 1, 3); }) < 1e-3);
}

TEST_CASE("attention and classifier gradients") {
  std::mt19937_64 rng(9);
  CHECK(worst_grad_error({rp({2, 5, 12}, rng)}, [](auto& v) { return multi_head_attention(v[0], 2); }) < 2e-3);
  CHECK(worst_grad_error({rp({3, 7}, rng)}, [](auto& v) { return softmax_last(v[0]); }) < 2e-3);
  CHECK(worst_grad_error({rp({3, 6}, rng)}, [](auto& v) { return l2_normalize_rows(v[0]); }) < 2e-3);
  CHECK(worst_grad_error({rp({3, 6}, rng), rp({3, 6}, rng)}, [](auto& v) { return row_dot(v[0], v[1]); }) < 1e-3);
  const std::vector<int> labels{0, 2, 1};
  CHECK(worst_grad_error({rp({3, 4}, rng)}, [&](auto& v) { return cross_entropy(v[0], labels); }) < 1e-3);
  CHECK(worst_grad_error({rp({2, 3, 5}, rng), rp({4, 5}, rng), rp({4}, rng)},
                         [](auto& v) { return linear(v[0], v[1], v[2]); }) < 1e-3);
}

TEST_CASE("frozen parents receive no gradient") {
  std::mt19937_64 rng(10);
  Var x = parameter(random_tensor({1, 2, 4, 4}, rng));
  Var w = constant(random_tensor({2, 2, 3, 3}, rng));
  Var y = sum(conv2d(x, w, nullptr, 1, 1));
  backward(y);
  CHECK(x->has_grad());
  CHECK_FALSE(w->has_grad());
}

TEST_CASE("no-grad guard skips graph recording") {
  Var x = parameter(Tensor({3}, 1.0f));
  NoGradGuard guard;
  Var y = scale(x, 2.0f);
  CHECK_FALSE(y->requires_grad);
  CHECK(y->parents.empty());
}

TEST_CASE("adam minimizes a quadratic") {
  Var x = parameter(Tensor({2}, std::vector<float>{3.0f, -2.0f}));
  Adam opt({x}, {.lr = 0.1f});
  for (int i = 0; i < 300; ++i) {
    opt.zero_grad();
    backward(sum(square(x)));
    opt.step();
  }
  CHECK(std::fabs(x->value[0]) < 0.05f);
  CHECK(std::fabs(x->value[1]) < 0.05f);
}

TEST_CASE("parameter digest changes with values") {
  ParamSet ps;
  Rng rng(1);
  auto c = Conv2d::create(ps, "c", 2, 2, 3, 1, rng);
  const auto before = ps.digest();
  CHECK(before == ps.digest());
  c.bias->value[0] += 1.0f;
  CHECK(before != ps.digest());
}
