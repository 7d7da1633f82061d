// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace idref {

namespace ag = idref::nn;
using nlohmann::json;

json Stage1Weights::to_json() const { return {{"eta1", eta1}, {"eta2", eta2}, {"eta3", eta3}, {"beta", beta}}; }

Stage1Weights Stage1Weights::from_json(const json& j) {
  Stage1Weights w;
  w.eta1 = j.value("eta1", w.eta1);
  w.eta2 = j.value("eta2", w.eta2);
  w.eta3 = j.value("eta3", w.eta3);
  w.beta = j.value("beta", w.beta);
  if (w.eta1 < 0 || w.eta2 < 0 || w.eta3 < 0 || w.beta < 0) throw std::invalid_argument("stage-1 weights must be non-negative");
  return w;
}

json Stage2Weights::to_json() const { return {{"lambda1", lambda1}, {"lambda2", lambda2}, {"lambda3", lambda3}}; }

Stage2Weights Stage2Weights::from_json(const json& j) {
  Stage2Weights w;
  w.lambda1 = j.value("lambda1", w.lambda1);
  w.lambda2 = j.value("lambda2", w.lambda2);
  w.lambda3 = j.value("lambda3", w.lambda3);
  if (w.lambda1 < 0 || w.lambda2 < 0 || w.lambda3 < 0) throw std::invalid_argument("swap weights must be non-negative");
  return w;
}

FeatureNet FeatureNet::create(std::span<const int> widths, std::uint64_t seed) {
  FeatureNet net;
  Rng rng(mix_seed(seed, 0xfea7));
  int in = 3;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    net.convs_.push_back(ag::Conv2d::create(net.params_, "level" + std::to_string(l), in, widths[l], 3, 2, rng));
    in = widths[l];
  }
  // Random biases break the symmetry of the leaky units a little.
  for (const auto& [name, var] : net.params_.items()) {
    if (name.ends_with(".bias"))
      for (auto& v : var->value.storage()) v = static_cast<float>(uniform(rng, -0.1, 0.1));
  }
  net.params_.set_trainable(false);
  return net;
}

FeatureNet FeatureNet::perceptual(std::uint64_t seed) {
  static constexpr int kWidths[] = {16, 32};
  return create(kWidths, seed);
}

FeatureNet FeatureNet::pyramid(std::uint64_t seed) {
  static constexpr int kWidths[] = {16, 32, 48, 64};
  return create(kWidths, seed);
}

std::vector<int> FeatureNet::widths() const {
  std::vector<int> w;
  for (const auto& c : convs_) w.push_back(c.weight->value.dim(0));
  return w;
}

std::vector<Var> FeatureNet::operator()(const Var& x) const {
  std::vector<Var> feats;
  Var h = ag::add_scalar(ag::scale(x, 2.0f), -1.0f);
  for (const auto& conv : convs_) {
    h = ag::leaky_relu(conv(h), kSlope);
    feats.push_back(h);
  }
  return feats;
}

PatchDiscriminator PatchDiscriminator::create(ag::ParamSet& ps, const std::string& prefix, int in_channels, Rng& rng) {
  PatchDiscriminator d;
  d.convs_.push_back(ag::Conv2d::create(ps, prefix + "conv0", in_channels, 32, 3, 2, rng));
  d.convs_.push_back(ag::Conv2d::create(ps, prefix + "conv1", 32, 64, 3, 2, rng));
  d.convs_.push_back(ag::Conv2d::create(ps, prefix + "conv2", 64, 64, 3, 1, rng));
  d.convs_.push_back(ag::Conv2d::create(ps, prefix + "conv3", 64, 1, 3, 1, rng, 0.5f));
  return d;
}

Var PatchDiscriminator::operator()(const Var& x) const {
  Var h = ag::add_scalar(ag::scale(x, 2.0f), -1.0f);
  for (std::size_t i = 0; i + 1 < convs_.size(); ++i) h = ag::leaky_relu(convs_[i](h), 0.2f);
  return ag::sigmoid(convs_.back()(h));
}

FeatureDiscriminator FeatureDiscriminator::create(ag::ParamSet& ps, const std::string& prefix, int in_channels,
                                                  Rng& rng) {
  FeatureDiscriminator d;
  d.conv1_ = ag::Conv2d::create(ps, prefix + "conv1", in_channels, 32, 3, 1, rng);
  d.conv2_ = ag::Conv2d::create(ps, prefix + "conv2", 32, 1, 1, 1, rng, 0.5f);
  return d;
}

Var FeatureDiscriminator::operator()(const Var& f) const {
  return ag::sigmoid(conv2_(ag::leaky_relu(conv1_(f), 0.2f)));
}

Var photo_loss(const Var& x_hat, const Var& x) {
  ag::require_same_shape(x_hat->value, x->value, "photo_loss");
  return ag::l1_mean(x_hat, x);
}

Var gated_photo_loss(const Var& x_hat, const Var& x, std::span<const bool> same_identity) {
  ag::require_same_shape(x_hat->value, x->value, "gated_photo_loss");
  const int batch = x->value.dim(0);
  if (same_identity.size() != static_cast<std::size_t>(batch)) {
    throw ag::ShapeError("gated_photo_loss: one indicator per sample required");
  }
  Tensor gate(x->value.shape());
  const std::size_t per = gate.numel() / static_cast<std::size_t>(batch);
  for (int b = 0; b < batch; ++b) {
    const float g = same_identity[static_cast<std::size_t>(b)] ? 1.0f : 0.0f;
    std::fill_n(gate.data() + static_cast<std::size_t>(b) * per, per, g);
  }
  return ag::mean(ag::mul(ag::abs(ag::sub(x_hat, x)), ag::constant(std::move(gate))));
}

Var perceptual_loss(const Var& x_hat, const Var& x, const FeatureNet& net) {
  ag::require_same_shape(x_hat->value, x->value, "perceptual_loss");
  const auto fa = net(x_hat);
  const auto fb = net(x);
  Var total = ag::mse_mean(fa[0], fb[0]);
  for (std::size_t l = 1; l < fa.size(); ++l) total = ag::add(total, ag::mse_mean(fa[l], fb[l]));
  return total;
}

Var adv_stage1(const Var& d_real, const Var& d_fake, Side side) {
  auto log_p = [](const Var& p) { return ag::mean(ag::log(ag::clamp(p, kProbEpsilon, 1.0f - kProbEpsilon))); };
  auto log_1mp = [](const Var& p) {
    return ag::mean(ag::log(ag::clamp(ag::add_scalar(ag::scale(p, -1.0f), 1.0f), kProbEpsilon, 1.0f - kProbEpsilon)));
  };
  if (!d_fake) throw std::invalid_argument("adv_stage1: d_fake is required");
  if (side == Side::generator) return ag::scale(log_p(d_fake), -1.0f);
  if (!d_real) throw std::invalid_argument("adv_stage1: discriminator side needs d_real");
  return ag::scale(ag::add(log_p(d_real), log_1mp(d_fake)), -1.0f);
}

CodeLoss code_loss(const Var& z_e, const Var& z_q, float beta) {
  ag::require_same_shape(z_e->value, z_q->value, "code_loss");
  const auto& shape = z_e->value.shape();
  // mse_mean averages over every element; rescale by the channel count to
  // sum over channels and average over cells instead.
  const float channels = shape.size() >= 2 ? static_cast<float>(shape[1]) : 1.0f;
  CodeLoss out;
  out.codebook_term = ag::scale(ag::mse_mean(ag::detach(z_e), z_q), channels);
  out.commit_term = ag::scale(ag::mse_mean(z_e, ag::detach(z_q)), channels);
  out.total = ag::add(out.codebook_term, ag::scale(out.commit_term, beta));
  return out;
}

Var stage1_total(const Stage1Components& c, const Stage1Weights& w) {
  Var t = ag::add(c.photo, ag::scale(c.perceptual, w.eta1));
  t = ag::add(t, ag::scale(c.adversarial, w.eta2));
  return ag::add(t, ag::scale(c.code, w.eta3));
}

Var identity_loss(const Var& e_target, const Var& e_output) {
  ag::require_same_shape(e_target->value, e_output->value, "identity_loss");
  try {
    return ag::add_scalar(ag::scale(ag::mean(ag::cosine_rows(e_target, e_output)), -1.0f), 1.0f);
  } catch (const std::domain_error&) {
    throw std::domain_error("identity_loss: zero-norm embedding");
  }
}

Var projected_gan_loss(const Var& x, const Var& x_hat, const FeatureNet& proj,
                       std::span<const FeatureDiscriminator> discriminators, Side side) {
  if (static_cast<int>(discriminators.size()) != proj.levels()) {
    throw std::invalid_argument("projected_gan_loss: " + std::to_string(discriminators.size()) +
                                " discriminators for " + std::to_string(proj.levels()) + " pyramid levels");
  }
  const auto fake = proj(x_hat);
  std::vector<Var> real;
  if (side == Side::discriminator) real = proj(x);
  Var total;
  for (std::size_t l = 0; l < fake.size(); ++l) {
    const Var d_fake = discriminators[l](fake[l]);
    const Var d_real = side == Side::discriminator ? discriminators[l](real[l]) : nullptr;
    const Var term = adv_stage1(d_real, d_fake, side);
    total = total ? ag::add(total, term) : term;
  }
  return total;
}

Var swap_total(const SwapComponents& c, bool same_identity, const Stage2Weights& w) {
  Var t = c.identity;
  if (same_identity) t = ag::add(t, ag::scale(c.photo, w.lambda1));
  t = ag::add(t, ag::scale(c.lpips, w.lambda2));
  return ag::add(t, ag::scale(c.adversarial, w.lambda3));
}

}  // namespace idref
