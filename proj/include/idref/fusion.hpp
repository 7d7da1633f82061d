// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <span>
#include <vector>

#include <json.hpp>

#include "idref/image.hpp"
#include "idref/vqcore.hpp"

namespace idref {

/// Fixed book order of the bank.
inline constexpr std::array<CodebookTag, 5> kBankOrder{CodebookTag::diffuse, CodebookTag::specular,
                                                       CodebookTag::roughness, CodebookTag::normal,
                                                       CodebookTag::rgb_texture};

/// Book that a training image of `domain` fine-tunes.
CodebookTag book_for(Domain domain);
int bank_index(CodebookTag tag);

class BankError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CodebookBank {
  nn::ParamSet params;  // "<tag>" -> [N,d]
  std::vector<Codebook> books;

  /// Every book starts as a copy of `shared`, in kBankOrder.
  static CodebookBank from_shared(const Codebook& shared);
  /// Arbitrary book list (tests and degenerate K=1 runs).
  static CodebookBank from_books(std::span<const Tensor> codes, std::span<const CodebookTag> tags);

  int size() const { return static_cast<int>(books.size()); }
  int dim() const { return books.front().dim(); }
  std::vector<Var> codes() const;
  void validate() const;
};

std::vector<Quantized> multi_quantize(const Var& z, const CodebookBank& bank);

struct FusionConfig {
  int blocks = 2;
  int heads = 4;
  int width = 64;
  int mlp_ratio = 2;

  nlohmann::json to_json() const;
  static FusionConfig from_json(const nlohmann::json& j);
};

/// Self-attention stack over latent cells ending in a per-cell softmax over
/// the K books. Output weights are laid out [B,K,h,w].
class FusionNet {
 public:
  static FusionNet create(nn::ParamSet& ps, const FusionConfig& cfg, int latent_dim, int latent_size, int books,
                          Rng& rng);

  /// Pre-softmax scores [B,h*w,K].
  Var logits(const Var& z) const;
  Var operator()(const Var& z) const;
  int books() const { return books_; }

 private:
  struct Block {
    nn::LayerNorm norm1, norm2;
    nn::Linear qkv, proj, fc1, fc2;
  };

  FusionConfig cfg_;
  int latent_dim_ = 0, latent_size_ = 0, books_ = 0;
  nn::Linear embed_;
  Var pos_;
  std::vector<Block> blocks_;
  nn::LayerNorm norm_out_;
  nn::Linear head_;
};

/// Softmax over the last axis of [B,T,K] logits, returned as [B,K,h,w].
Var weights_from_logits(const Var& logits, int height, int width);

/// Per-cell convex combination sum_k w[:,k] * z_q[k].
Var fuse(std::span<const Var> zq, const Var& weights);

/// encode -> multi_quantize -> fusion weights -> fuse.
struct FusedLatent {
  Var z;
  std::vector<Quantized> books;
  Var weights;  // [B,K,h,w]
  Var fused;    // [B,d,h,w]
};

FusedLatent fused_latent(const ModelBundle& base, const CodebookBank& bank, const FusionNet& net, const Var& x);

struct WeightSummary {
  std::string label;
  std::vector<double> mean;  // one entry per book, sums to 1
};

WeightSummary weight_summary(const Tensor& weights, const std::string& label);

}  // namespace idref
