// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "idref/layers.hpp"

namespace idref {

using nn::Tensor;
using nn::Var;

struct Stage1Weights {
  float eta1 = 1.5f;  // perceptual
  float eta2 = 0.2f;  // adversarial
  float eta3 = 1.0f;  // code
  float beta = 0.25f;

  nlohmann::json to_json() const;
  static Stage1Weights from_json(const nlohmann::json& j);
};

struct Stage2Weights {
  float lambda1 = 1.5f;  // photo (gated)
  float lambda2 = 0.1f;  // perceptual proxy
  float lambda3 = 0.1f;  // adversarial

  nlohmann::json to_json() const;
  static Stage2Weights from_json(const nlohmann::json& j);
};

/// Probability clamp used by every adversarial term.
inline constexpr float kProbEpsilon = 1e-6f;

/// Fixed, seed-initialised convolutional feature extractor. Each level is a
/// stride-2 3x3 convolution followed by a leaky ReLU; inputs in [0,1] are
/// mapped to [-1,1] first. Parameters never train.
class FeatureNet {
 public:
  static FeatureNet create(std::span<const int> widths, std::uint64_t seed);
  static FeatureNet perceptual(std::uint64_t seed = 0x9e7c);  // two levels: 16, 32
  static FeatureNet pyramid(std::uint64_t seed = 0x9a1d);     // four levels: 16, 32, 48, 64

  std::vector<Var> operator()(const Var& x) const;
  int levels() const { return static_cast<int>(convs_.size()); }
  const nn::Conv2d& conv(int level) const { return convs_[static_cast<std::size_t>(level)]; }
  std::vector<int> widths() const;

  static constexpr float kSlope = 0.2f;

 private:
  nn::ParamSet params_;
  std::vector<nn::Conv2d> convs_;
};

/// Four-layer patch discriminator emitting per-patch probabilities.
class PatchDiscriminator {
 public:
  static PatchDiscriminator create(nn::ParamSet& ps, const std::string& prefix, int in_channels, Rng& rng);
  Var operator()(const Var& x) const;

 private:
  std::vector<nn::Conv2d> convs_;
};

/// Small per-level discriminator on projected features.
class FeatureDiscriminator {
 public:
  static FeatureDiscriminator create(nn::ParamSet& ps, const std::string& prefix, int in_channels, Rng& rng);
  Var operator()(const Var& f) const;
  const nn::Conv2d& conv1() const { return conv1_; }
  const nn::Conv2d& conv2() const { return conv2_; }

 private:
  nn::Conv2d conv1_, conv2_;
};

enum class Side { generator, discriminator };

Var photo_loss(const Var& x_hat, const Var& x);
/// Photo loss with per-sample indicator weights (1 keeps, 0 drops a sample),
/// averaged over the whole batch.
Var gated_photo_loss(const Var& x_hat, const Var& x, std::span<const bool> same_identity);
Var perceptual_loss(const Var& x_hat, const Var& x, const FeatureNet& net);

/// d_real / d_fake are discriminator probabilities. The generator side needs
/// only d_fake; pass nullptr for d_real.
Var adv_stage1(const Var& d_real, const Var& d_fake, Side side);

struct CodeLoss {
  Var codebook_term;  // mean ||sg(z_e) - z_q||^2
  Var commit_term;    // mean ||z_e - sg(z_q)||^2
  Var total;          // codebook_term + beta * commit_term
};

/// Squared norms are summed over the channel axis and averaged over cells.
CodeLoss code_loss(const Var& z_e, const Var& z_q, float beta);

struct Stage1Components {
  Var photo, perceptual, adversarial, code;
};
Var stage1_total(const Stage1Components& c, const Stage1Weights& w);

/// Mean over rows of 1 - cos(e_target, e_output). Zero-norm rows throw.
Var identity_loss(const Var& e_target, const Var& e_output);

Var projected_gan_loss(const Var& x, const Var& x_hat, const FeatureNet& proj,
                       std::span<const FeatureDiscriminator> discriminators, Side side);

struct SwapComponents {
  Var identity, photo, lpips, adversarial;
};
Var swap_total(const SwapComponents& c, bool same_identity, const Stage2Weights& w);

}  // namespace idref
