// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "idref/datagen.hpp"
#include "idref/fusion.hpp"
#include "idref/image.hpp"
#include "idref/vqcore.hpp"

namespace idref {

class SwapperError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EmbedderConfig {
  int input_size = 64;
  int embed_dim = 64;
  std::vector<int> widths{24, 48, 64, 96};
  float scale = 16.0f;  // cosine classifier temperature

  nlohmann::json to_json() const;
  static EmbedderConfig from_json(const nlohmann::json& j);
};

/// Small CNN mapping an rgb face to a unit-norm identity embedding.
class Embedder {
 public:
  static Embedder create(nn::ParamSet& ps, const EmbedderConfig& cfg, Rng& rng);

  /// [B,3,S,S] in [0,1] -> [B,e], rows of unit norm.
  Var operator()(const Var& x) const;
  /// Cosine classifier logits scale * <e, w_c / |w_c|> for embeddings e [B,e]
  /// and class weights [C,e].
  Var class_logits(const Var& embeddings, const Var& class_weights) const;
  const EmbedderConfig& config() const { return cfg_; }

 private:
  struct Level {
    nn::Conv2d down, conv;
  };
  EmbedderConfig cfg_;
  std::vector<Level> levels_;
  nn::Linear head_;
};

/// Rejects non-rgb images and resizes to the embedder input size.
std::vector<float> embed_identity(const DomainImage& face, const Embedder& embedder);

/// Deterministic unit vector per identity; a stand-in embedder whose quality
/// does not depend on training.
std::vector<float> oracle_embedding(const IdentityParams& identity, int dim);

/// sigma * (f - mean_f) / (std_f + eps) + mu with per-(sample, channel) sigma,
/// mu of shape [B,C] and population statistics over the spatial cells.
Var adain(const Var& f, const Var& sigma, const Var& mu, float eps = 1e-5f);

struct SwapperConfig {
  /// Tap sizes that receive a branch.
  std::vector<int> scales;
  int embed_dim = 64;
  float slope = 0.2f;

  /// Every tap scale except the largest.
  static SwapperConfig defaults_for(const VqConfig& vq, int embed_dim = 64);
  nlohmann::json to_json() const;
  static SwapperConfig from_json(const nlohmann::json& j, const VqConfig& vq);
};

/// One identity-conditioned residual branch: three conv + AdaIN + leaky
/// blocks at tap resolution, 2x upsampling, then a zero-initialised 1x1 conv
/// to the stage's channel count.
class SwapperBranch {
 public:
  static SwapperBranch create(nn::ParamSet& ps, const std::string& name, int tap_size, int in_channels,
                              int out_channels, int embed_dim, float slope, Rng& rng);
  Var operator()(const Var& tap, const Var& z_id) const;
  int tap_size() const { return tap_size_; }

 private:
  struct Block {
    nn::Conv2d conv;
    nn::Linear to_sigma, to_mu;
  };
  int tap_size_ = 0;
  float slope_ = 0.2f;
  std::vector<Block> blocks_;
  nn::Conv2d out_;
};

class Swapper {
 public:
  static Swapper create(nn::ParamSet& ps, const SwapperConfig& cfg, const VqConfig& vq, const Decoder& decoder,
                        Rng& rng);

  /// Decoder hook adding branch(tap, z_id) at configured scales and passing
  /// other stages through untouched. z_id: [B,e].
  InjectHook hook(const Var& z_id) const;
  const SwapperConfig& config() const { return cfg_; }
  const std::vector<SwapperBranch>& branches() const { return branches_; }

 private:
  SwapperConfig cfg_;
  std::vector<SwapperBranch> branches_;
};

/// Borrowed components of the full swap path.
struct SwapModels {
  const ModelBundle* base = nullptr;
  const CodebookBank* bank = nullptr;
  const FusionNet* fusion = nullptr;
  const Embedder* embedder = nullptr;
  const Swapper* swapper = nullptr;

  void require_complete() const;
};

/// Batched swap: template images x [B,3,H,W], identity embeddings [B,e].
Decoder::Output swap_forward(const Var& x, const Var& z_id, const SwapModels& models);

DomainImage swap(const DomainImage& target, const DomainImage& id_face, const SwapModels& models);

}  // namespace idref
