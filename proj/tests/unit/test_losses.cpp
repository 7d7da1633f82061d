// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "idref/losses.hpp"
#include "support/gradcheck.hpp"

using namespace idref;
namespace ag = idref::nn;
using idref::testing::numeric_grad;
using idref::testing::random_tensor;
using idref::testing::relative_error;

namespace {

double value(const Var& v) { return v->value[0]; }

Var cst(const Tensor& t) { return ag::constant(t); }

/// Direct-loop stride-2 3x3 convolution with zero padding and leaky ReLU.
Tensor conv_leaky_reference(const Tensor& x, const Tensor& w, const Tensor& b, float slope) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
  const int ho = (h + 2 - 3) / 2 + 1, wo = (wd + 2 - 3) / 2 + 1;
  Tensor out({n, co, ho, wo});
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < co; ++o)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) {
          double acc = b[static_cast<std::size_t>(o)];
          for (int i = 0; i < ci; ++i)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = 2 * y + ky - 1, ix = 2 * xx + kx - 1;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                acc += static_cast<double>(w.at(o, i, ky, kx)) * x.at(s, i, iy, ix);
              }
          out.at(s, o, y, xx) = static_cast<float>(acc > 0 ? acc : slope * acc);
        }
  return out;
}

double mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  return s / static_cast<double>(a.numel());
}

double adv_formula(const Tensor& real, const Tensor& fake, Side side) {
  auto c = [](double p) { return std::clamp(p, 1e-6, 1.0 - 1e-6); };
  double lr = 0.0, lf = 0.0, lg = 0.0;
  for (float p : real.values()) lr += std::log(c(p));
  for (float p : fake.values()) {
    lf += std::log(1.0 - c(p));
    lg += std::log(c(p));
  }
  if (side == Side::generator) return -lg / static_cast<double>(fake.numel());
  return -(lr / static_cast<double>(real.numel()) + lf / static_cast<double>(fake.numel()));
}


/// Double-precision NCHW array for the reference forward passes below.
struct DTensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;
  DTensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * h_ * w_) {}
  explicit DTensor(const Tensor& t) : DTensor(t.dim(0), t.dim(1), t.dim(2), t.dim(3)) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = t[i];
  }
  double& at(int a, int b, int y, int x) { return v[((static_cast<std::size_t>(a) * c + b) * h + y) * w + x]; }
  double at(int a, int b, int y, int x) const { return v[((static_cast<std::size_t>(a) * c + b) * h + y) * w + x]; }
};

DTensor conv_ref(const DTensor& x, const ag::Conv2d& conv) {
  const Tensor& wt = conv.weight->value;
  const int co = wt.dim(0), k = wt.dim(2), s = conv.stride, p = conv.pad;
  DTensor out(x.n, co, (x.h + 2 * p - k) / s + 1, (x.w + 2 * p - k) / s + 1);
  for (int a = 0; a < x.n; ++a)
    for (int o = 0; o < co; ++o)
      for (int y = 0; y < out.h; ++y)
        for (int xx = 0; xx < out.w; ++xx) {
          double acc = conv.bias->value[static_cast<std::size_t>(o)];
          for (int i = 0; i < x.c; ++i)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = s * y + ky - p, ix = s * xx + kx - p;
                if (iy >= 0 && ix >= 0 && iy < x.h && ix < x.w) acc += wt.at(o, i, ky, kx) * x.at(a, i, iy, ix);
              }
          out.at(a, o, y, xx) = acc;
        }
  return out;
}

DTensor leaky_ref(DTensor x, double slope) {
  for (auto& e : x.v) e = e > 0 ? e : slope * e;
  return x;
}

std::vector<DTensor> features_ref(DTensor x, const FeatureNet& net) {
  for (auto& e : x.v) e = 2.0 * e - 1.0;
  std::vector<DTensor> out;
  for (int l = 0; l < net.levels(); ++l) {
    x = leaky_ref(conv_ref(x, net.conv(l)), FeatureNet::kSlope);
    out.push_back(x);
  }
  return out;
}

/// Central differences of a double-precision forward; small steps stay clear
/// of the leaky-ReLU kinks.
Tensor numeric_grad_double(const Tensor& at, const std::function<double(const DTensor&)>& f, double h = 1e-6) {
  DTensor x(at);
  Tensor g(at.shape());
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    const double orig = x.v[i];
    x.v[i] = orig + h;
    const double up = f(x);
    x.v[i] = orig - h;
    const double down = f(x);
    x.v[i] = orig;
    g[i] = static_cast<float>((up - down) / (2 * h));
  }
  return g;
}

}  // namespace

TEST_CASE("photo loss") {
  Rng rng(1);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng, 0.0f, 0.5f);
  CHECK(value(photo_loss(cst(x), cst(x))) == 0.0);
  Tensor shifted = x;
  for (auto& v : shifted.storage()) v += 0.5f;
  CHECK(value(photo_loss(cst(shifted), cst(x))) == doctest::Approx(0.5).epsilon(1e-6));
  const Tensor y = random_tensor({2, 3, 8, 8}, rng, 0.0f, 1.0f);
  double ref = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) ref += std::abs(static_cast<double>(x[i]) - y[i]);
  CHECK(value(photo_loss(cst(x), cst(y))) == doctest::Approx(ref / static_cast<double>(x.numel())).epsilon(1e-6));
  CHECK_THROWS_AS(photo_loss(cst(x), cst(Tensor({2, 3, 4, 4}))), ag::ShapeError);
}

TEST_CASE("perceptual loss matches a hand-rolled two-level extractor") {
  const FeatureNet net = FeatureNet::perceptual();
  REQUIRE(net.levels() == 2);
  Rng rng(2);
  const Tensor a = random_tensor({2, 3, 16, 16}, rng, 0.0f, 1.0f);
  const Tensor b = random_tensor({2, 3, 16, 16}, rng, 0.0f, 1.0f);
  CHECK(value(perceptual_loss(cst(a), cst(a), net)) == 0.0);
  CHECK(value(perceptual_loss(cst(a), cst(b), net)) == value(perceptual_loss(cst(b), cst(a), net)));

  auto features = [&](Tensor x) {
    for (auto& v : x.storage()) v = 2.0f * v - 1.0f;
    std::vector<Tensor> out;
    for (int l = 0; l < 2; ++l) {
      x = conv_leaky_reference(x, net.conv(l).weight->value, net.conv(l).bias->value, FeatureNet::kSlope);
      out.push_back(x);
    }
    return out;
  };
  const auto fa = features(a), fb = features(b);
  const double expected = mse(fa[0], fb[0]) + mse(fa[1], fb[1]);
  CHECK(value(perceptual_loss(cst(a), cst(b), net)) == doctest::Approx(expected).epsilon(1e-4));
}

TEST_CASE("stage-1 adversarial loss") {
  const float eps = kProbEpsilon;
  const Var real = cst(Tensor({4}, 1.0f - eps));
  const Var fake = cst(Tensor({4}, eps));
  CHECK(value(adv_stage1(real, fake, Side::discriminator)) == doctest::Approx(0.0).epsilon(1e-5));
  CHECK(value(adv_stage1(nullptr, cst(Tensor({4}, 0.5f)), Side::generator)) ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-6));
  Rng rng(3);
  const Tensor r = random_tensor({3, 1, 4, 4}, rng, 0.0f, 1.0f);
  const Tensor f = random_tensor({3, 1, 4, 4}, rng, 0.0f, 1.0f);
  CHECK(value(adv_stage1(cst(r), cst(f), Side::discriminator)) ==
        doctest::Approx(adv_formula(r, f, Side::discriminator)).epsilon(1e-5));
  CHECK(value(adv_stage1(cst(r), cst(f), Side::generator)) ==
        doctest::Approx(adv_formula(r, f, Side::generator)).epsilon(1e-5));
  // Saturated inputs stay finite thanks to the clamp.
  CHECK(std::isfinite(value(adv_stage1(cst(Tensor({2}, 0.0f)), cst(Tensor({2}, 1.0f)), Side::discriminator))));
}

TEST_CASE("code loss values and stop-gradient blocks") {
  CHECK(value(code_loss(cst(Tensor({1, 1, 1, 1}, 0.3f)), cst(Tensor({1, 1, 1, 1}, 0.3f)), 0.25f).total) == 0.0);
  const CodeLoss scalar = code_loss(cst(Tensor({1, 1, 1, 1}, 1.0f)), cst(Tensor({1, 1, 1, 1}, 0.0f)), 0.25f);
  CHECK(value(scalar.total) == 1.25);

  Rng rng(4);
  const Var ze = ag::parameter(random_tensor({2, 4, 8, 8}, rng));
  const Var zq = ag::parameter(random_tensor({2, 4, 8, 8}, rng));
  SUBCASE("codebook term") {
    ag::backward(code_loss(ze, zq, 0.25f).codebook_term);
    CHECK_FALSE(ze->has_grad());
    const Tensor fd = numeric_grad(zq, [&] { return value(code_loss(ze, zq, 0.25f).codebook_term); }, 1e-2f);
    CHECK(relative_error(zq->grad, fd) < 1e-3);
  }
  SUBCASE("commitment term") {
    ag::backward(code_loss(ze, zq, 0.25f).commit_term);
    CHECK_FALSE(zq->has_grad());
    const Tensor fd = numeric_grad(ze, [&] { return value(code_loss(ze, zq, 0.25f).commit_term); }, 1e-2f);
    CHECK(relative_error(ze->grad, fd) < 1e-3);
  }
  SUBCASE("total splits the gradient by term") {
    ag::backward(code_loss(ze, zq, 0.25f).total);
    const Tensor fd_q = numeric_grad(zq, [&] { return value(code_loss(ze, zq, 0.25f).codebook_term); }, 1e-2f);
    const Tensor fd_e = numeric_grad(ze, [&] { return 0.25 * value(code_loss(ze, zq, 0.25f).commit_term); }, 1e-2f);
    CHECK(relative_error(zq->grad, fd_q) < 1e-3);
    CHECK(relative_error(ze->grad, fd_e) < 1e-3);
  }
}

TEST_CASE("stage-1 total") {
  const Stage1Weights w;
  auto s = [](float v) { return cst(Tensor({1}, v)); };
  CHECK(value(stage1_total({s(0), s(0), s(0), s(0)}, w)) == 0.0);
  CHECK(value(stage1_total({s(1), s(1), s(1), s(1)}, w)) == doctest::Approx(3.7).epsilon(1e-7));
  const double once = value(stage1_total({s(0.3f), s(1.7f), s(0.2f), s(2.5f)}, w));
  const double twice = value(stage1_total({s(0.6f), s(3.4f), s(0.4f), s(5.0f)}, w));
  CHECK(twice == doctest::Approx(2.0 * once).epsilon(1e-6));
}

TEST_CASE("identity loss") {
  auto row = [](std::vector<float> v) {
    const int n = static_cast<int>(v.size());
    return cst(Tensor({1, n}, std::move(v)));
  };
  const auto a = row({0.3f, -1.2f, 0.5f, 2.0f});
  CHECK(value(identity_loss(a, a)) == 0.0);
  CHECK(value(identity_loss(row({1, 0, 0, 0}), row({0, 3, 0, 0}))) == 1.0);
  CHECK(value(identity_loss(a, row({-0.3f, 1.2f, -0.5f, -2.0f}))) == 2.0);
  CHECK_THROWS_AS(identity_loss(a, row({0, 0, 0, 0})), std::domain_error);

  Rng rng(5);
  const Tensor x = random_tensor({6, 16}, rng);
  const Tensor y = random_tensor({6, 16}, rng);
  Tensor y_scaled = y;
  for (auto& v : y_scaled.storage()) v *= 4.0f;
  const double base = value(identity_loss(cst(x), cst(y)));
  CHECK(base >= 0.0);
  CHECK(base <= 2.0);
  CHECK(value(identity_loss(cst(x), cst(y_scaled))) == base);
  Tensor y_odd = y;
  for (auto& v : y_odd.storage()) v *= 3.7f;
  CHECK(value(identity_loss(cst(x), cst(y_odd))) == doctest::Approx(base).epsilon(1e-6));

  const Var px = ag::parameter(x);
  ag::backward(identity_loss(px, cst(y)));
  const Tensor fd = numeric_grad(px, [&] { return value(identity_loss(px, cst(y))); }, 1e-2f);
  CHECK(relative_error(px->grad, fd) < 1e-3);
}

TEST_CASE("projected GAN loss") {
  const FeatureNet proj = FeatureNet::pyramid();
  REQUIRE(proj.levels() == 4);
  Rng rng(6);
  ag::ParamSet dps;
  std::vector<FeatureDiscriminator> ds;
  for (int l = 0; l < 4; ++l) ds.push_back(FeatureDiscriminator::create(dps, "d" + std::to_string(l) + ".", proj.widths()[static_cast<std::size_t>(l)], rng));
  const Tensor x = random_tensor({2, 3, 32, 32}, rng, 0.0f, 1.0f);
  const Tensor xh = random_tensor({2, 3, 32, 32}, rng, 0.0f, 1.0f);

  SUBCASE("per-level recomputation") {
    const auto fr = proj(cst(x)), ff = proj(cst(xh));
    for (Side side : {Side::generator, Side::discriminator}) {
      double expected = 0.0;
      for (int l = 0; l < 4; ++l) {
        const auto lu = static_cast<std::size_t>(l);
        expected += adv_formula(ds[lu](fr[lu])->value, ds[lu](ff[lu])->value, side);
      }
      CHECK(value(projected_gan_loss(cst(x), cst(xh), proj, ds, side)) == doctest::Approx(expected).epsilon(1e-5));
    }
  }
  SUBCASE("single level is the stage-1 form") {
    static constexpr int kOne[] = {16};
    const FeatureNet one = FeatureNet::create(kOne, 0x9a1d);
    const auto fr = one(cst(x)), ff = one(cst(xh));
    const std::span<const FeatureDiscriminator> first(ds.data(), 1);
    CHECK(value(projected_gan_loss(cst(x), cst(xh), one, first, Side::discriminator)) ==
          value(adv_stage1(ds[0](fr[0]), ds[0](ff[0]), Side::discriminator)));
  }
  SUBCASE("undecided discriminators") {
    for (const auto& [name, var] : dps.items())
      if (name.find("conv2") != std::string::npos) var->value.zero();
    CHECK(value(projected_gan_loss(cst(x), cst(xh), proj, ds, Side::discriminator)) ==
          doctest::Approx(4 * 2 * std::numbers::ln2).epsilon(1e-6));
  }
  SUBCASE("level mismatch") {
    CHECK_THROWS_AS(projected_gan_loss(cst(x), cst(xh), proj, std::span(ds.data(), 3), Side::generator),
                    std::invalid_argument);
  }
  SUBCASE("gradient") {
    Rng r2(9);
    const Var small = ag::parameter(random_tensor({1, 3, 8, 8}, r2, 0.1f, 0.9f));
    const Var ref = cst(random_tensor({1, 3, 8, 8}, r2, 0.1f, 0.9f));
    ag::backward(projected_gan_loss(ref, small, proj, ds, Side::generator));
    const Tensor fd = numeric_grad_double(small->value, [&](const DTensor& x) {
      const auto feats = features_ref(x, proj);
      double total = 0.0;
      for (int l = 0; l < 4; ++l) {
        const auto lu = static_cast<std::size_t>(l);
        const DTensor logits = conv_ref(leaky_ref(conv_ref(feats[lu], ds[lu].conv1()), 0.2), ds[lu].conv2());
        double acc = 0.0;
        for (double z : logits.v) acc += std::log(std::clamp(1.0 / (1.0 + std::exp(-z)), 1e-6, 1.0 - 1e-6));
        total -= acc / static_cast<double>(logits.v.size());
      }
      return total;
    });
    CHECK(relative_error(small->grad, fd) < 1e-3);
  }
}

TEST_CASE("swap total and indicator gating") {
  const Stage2Weights w;
  auto s = [](float v) { return cst(Tensor({1}, v)); };
  CHECK(value(swap_total({s(1), s(1), s(1), s(1)}, true, w)) == doctest::Approx(2.7).epsilon(1e-7));
  CHECK(value(swap_total({s(0.4f), s(123.0f), s(0.0f), s(0.0f)}, false, w)) == doctest::Approx(0.4).epsilon(1e-7));
  CHECK(value(swap_total({s(0), s(0), s(0), s(0)}, true, w)) == 0.0);

  Rng rng(7);
  const Var xh = ag::parameter(random_tensor({2, 3, 8, 8}, rng));
  const Var x = cst(random_tensor({2, 3, 8, 8}, rng));
  const bool gates[] = {false, true};
  ag::backward(gated_photo_loss(xh, x, gates));
  for (std::size_t i = 0; i < 3 * 64; ++i) REQUIRE(xh->grad[i] == 0.0f);
  bool any = false;
  for (std::size_t i = 3 * 64; i < 6 * 64; ++i) any = any || xh->grad[i] != 0.0f;
  CHECK(any);
  const bool none[] = {false, false};
  CHECK(value(gated_photo_loss(xh, x, none)) == 0.0);
}

TEST_CASE("losses agree with finite differences on 8x8 inputs") {
  Rng rng(8);
  const Var a = ag::parameter(random_tensor({1, 3, 8, 8}, rng, 0.0f, 1.0f));
  const Var b = cst(random_tensor({1, 3, 8, 8}, rng, 0.0f, 1.0f));
  const FeatureNet net = FeatureNet::perceptual();
  SUBCASE("photo") {
    // Keep every |a - b| well away from the kink so the step never crosses it.
    Tensor far = a->value;
    for (std::size_t i = 0; i < far.numel(); ++i) far[i] = b->value[i] + (i % 2 ? 1.0f : -1.0f) * (0.05f + 0.4f * a->value[i]);
    const Var c = ag::parameter(far);
    ag::backward(photo_loss(c, b));
    CHECK(relative_error(c->grad, numeric_grad(c, [&] { return value(photo_loss(c, b)); }, 1e-2f)) < 1e-3);
  }
  SUBCASE("perceptual") {
    ag::backward(perceptual_loss(a, b, net));
    const auto fb = features_ref(DTensor(b->value), net);
    const Tensor fd = numeric_grad_double(a->value, [&](const DTensor& x) {
      const auto fa = features_ref(x, net);
      double total = 0.0;
      for (std::size_t l = 0; l < fa.size(); ++l) {
        double acc = 0.0;
        for (std::size_t i = 0; i < fa[l].v.size(); ++i) acc += (fa[l].v[i] - fb[l].v[i]) * (fa[l].v[i] - fb[l].v[i]);
        total += acc / static_cast<double>(fa[l].v.size());
      }
      return total;
    });
    CHECK(relative_error(a->grad, fd) < 1e-3);
  }
  SUBCASE("adversarial") {
    const Var p = ag::parameter(random_tensor({1, 1, 8, 8}, rng, 0.05f, 0.95f));
    ag::backward(adv_stage1(b, p, Side::discriminator));
    CHECK(relative_error(p->grad, numeric_grad(p, [&] { return value(adv_stage1(b, p, Side::discriminator)); }, 1e-3f)) <
          1e-3);
  }
}
