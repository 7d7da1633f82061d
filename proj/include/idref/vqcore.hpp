// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "idref/checkpoint.hpp"
#include "idref/layers.hpp"

namespace idref {

using nn::Tensor;
using nn::Var;

/// Autoencoder architecture. Level 0 runs at image resolution and each further
/// level halves it, so the compression ratio is 2^(levels - 1).
struct VqConfig {
  int image_size = 64;
  int latent_dim = 64;
  int codebook_size = 256;
  std::vector<int> channels{16, 32, 48, 64};
  std::vector<int> encoder_blocks{0, 1, 1, 1};
  std::vector<int> decoder_blocks{0, 1, 1, 1};
  int groups = 8;
  /// "uniform": U(-1/N, 1/N); "normal": N(0, init_scale^2).
  std::string codebook_init = "uniform";
  float init_scale = 1.0f;

  int levels() const { return static_cast<int>(channels.size()); }
  int ratio() const { return 1 << (levels() - 1); }
  int latent_size() const { return image_size / ratio(); }
  /// Spatial sizes of the decoder taps, small to large.
  std::vector<int> tap_sizes() const;
  void validate() const;

  nlohmann::json to_json() const;
  static VqConfig from_json(const nlohmann::json& j);
};

class Encoder {
 public:
  static Encoder create(nn::ParamSet& ps, const VqConfig& cfg, Rng& rng);
  /// [B,3,H,W] -> [B,d,H/r,W/r].
  Var operator()(const Var& x) const;

 private:
  VqConfig cfg_;
  nn::Conv2d conv_in_;
  std::vector<nn::Conv2d> down_;
  std::vector<std::vector<nn::ResBlock>> blocks_;
  nn::GroupNorm norm_out_;
  nn::Conv2d conv_out_;
};

/// Called once per upsampling stage with the stage's input tap and the
/// freshly upsampled feature; returns the feature the decoder continues with.
using InjectHook = std::function<Var(int stage, const Var& tap, const Var& upsampled)>;

class Decoder {
 public:
  struct Output {
    Var image;              // [B,3,H,W] in (0,1)
    std::vector<Var> taps;  // stage inputs, small to large
  };

  static Decoder create(nn::ParamSet& ps, const VqConfig& cfg, Rng& rng);
  Output operator()(const Var& zq, const InjectHook& hook = {}) const;

  /// Channel count of the upsampled feature produced at each stage.
  std::vector<int> stage_channels() const;
  /// Channel count of each tap.
  std::vector<int> tap_channels() const;

 private:
  VqConfig cfg_;
  nn::Conv2d conv_in_;
  std::vector<nn::ResBlock> mid_;
  std::vector<nn::Conv2d> up_;  // up_[s]: stage s, applied after 2x upsampling
  std::vector<std::vector<nn::ResBlock>> blocks_;
  nn::GroupNorm norm_out_;
  nn::Conv2d conv_out_;
};

enum class CodebookTag { shared, diffuse, specular, roughness, normal, rgb_texture };
std::string to_string(CodebookTag tag);
CodebookTag parse_codebook_tag(const std::string& s);

struct Codebook {
  Var codes;  // [N,d]
  CodebookTag tag = CodebookTag::shared;

  int size() const { return codes->value.dim(0); }
  int dim() const { return codes->value.dim(1); }
};

Tensor init_codebook(const VqConfig& cfg, Rng& rng);

/// Nearest code per latent cell under squared Euclidean distance; ties go to
/// the lowest index. Cells are enumerated batch-major then row-major.
std::vector<int> nearest_codes(const Tensor& z, const Tensor& codebook);

struct Quantized {
  Var values;  // codebook rows gathered into [B,d,h,w]; gradients reach the codebook
  std::vector<int> indices;
};

Quantized quantize(const Var& z, const Var& codebook);

struct CodebookStats {
  std::vector<long> histogram;
  double perplexity = 1.0;
  int used = 0;
};

CodebookStats codebook_stats(std::span<const int> indices, int codebook_size);

/// Replaces every code with zero usage by a latent cell of `z` drawn at
/// random (without replacement while cells remain). Returns how many codes
/// were restarted.
int restart_dead_codes(Tensor& codebook, std::span<const long> usage, const Tensor& z, Rng& rng);

/// Encoder, decoder and shared codebook with their parameter sets.
struct ModelBundle {
  VqConfig config;
  nn::ParamSet encoder_params, decoder_params, codebook_params;
  Encoder encoder;
  Decoder decoder;
  Codebook shared;

  static ModelBundle create(const VqConfig& cfg, std::uint64_t seed);

  Var encode(const Var& x) const;
  Decoder::Output decode(const Var& zq, const InjectHook& hook = {}) const;
  /// encode -> quantize -> straight-through -> decode with the shared book.
  Decoder::Output reconstruct(const Var& x) const;

  void store(TensorMap& out) const;
  void load(const TensorMap& in);
};

}  // namespace idref
