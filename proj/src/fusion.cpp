// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/fusion.hpp"

#include <cmath>

namespace idref {

namespace ag = idref::nn;
using nlohmann::json;

CodebookTag book_for(Domain domain) {
  switch (domain) {
    case Domain::rgb: return CodebookTag::rgb_texture;
    case Domain::diffuse: return CodebookTag::diffuse;
    case Domain::specular: return CodebookTag::specular;
    case Domain::roughness: return CodebookTag::roughness;
    case Domain::normal: return CodebookTag::normal;
  }
  throw UnknownDomainError("unknown domain value " + std::to_string(static_cast<int>(domain)));
}

int bank_index(CodebookTag tag) {
  for (std::size_t k = 0; k < kBankOrder.size(); ++k)
    if (kBankOrder[k] == tag) return static_cast<int>(k);
  throw BankError("tag " + to_string(tag) + " is not part of the bank");
}

CodebookBank CodebookBank::from_shared(const Codebook& shared) {
  std::vector<Tensor> codes(kBankOrder.size(), shared.codes->value);
  return from_books(codes, kBankOrder);
}

CodebookBank CodebookBank::from_books(std::span<const Tensor> codes, std::span<const CodebookTag> tags) {
  if (codes.size() != tags.size() || codes.empty()) throw BankError("bank needs one tag per book");
  CodebookBank bank;
  for (std::size_t k = 0; k < codes.size(); ++k) {
    bank.books.push_back({bank.params.add(to_string(tags[k]), codes[k]), tags[k]});
  }
  bank.validate();
  return bank;
}

std::vector<Var> CodebookBank::codes() const {
  std::vector<Var> out;
  for (const auto& b : books) out.push_back(b.codes);
  return out;
}

void CodebookBank::validate() const {
  if (books.empty()) throw BankError("empty codebook bank");
  for (const auto& b : books) {
    if (b.codes->value.rank() != 2 || b.dim() != dim()) throw BankError("bank books disagree on code dimension");
  }
}

std::vector<Quantized> multi_quantize(const Var& z, const CodebookBank& bank) {
  bank.validate();
  if (z->value.rank() != 4 || z->value.dim(1) != bank.dim()) {
    throw BankError("multi_quantize: latent " + ag::to_string(z->value.shape()) + " vs code dimension " +
                    std::to_string(bank.dim()));
  }
  std::vector<Quantized> out;
  for (const auto& b : bank.books) out.push_back(quantize(z, b.codes));
  return out;
}

json FusionConfig::to_json() const {
  return {{"blocks", blocks}, {"heads", heads}, {"width", width}, {"mlp_ratio", mlp_ratio}};
}

FusionConfig FusionConfig::from_json(const json& j) {
  FusionConfig c;
  c.blocks = j.value("blocks", c.blocks);
  c.heads = j.value("heads", c.heads);
  c.width = j.value("width", c.width);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  if (c.heads <= 0 || c.width % c.heads != 0) throw std::invalid_argument("fusion: width must divide into heads");
  return c;
}

FusionNet FusionNet::create(ag::ParamSet& ps, const FusionConfig& cfg, int latent_dim, int latent_size, int books,
                            Rng& rng) {
  FusionNet f;
  f.cfg_ = cfg;
  f.latent_dim_ = latent_dim;
  f.latent_size_ = latent_size;
  f.books_ = books;
  const int c = cfg.width, tokens = latent_size * latent_size;
  f.embed_ = ag::Linear::create(ps, "embed", latent_dim, c, rng);
  f.pos_ = ps.add("pos", ag::randn({tokens, c}, 0.02f, rng));
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string n = "block" + std::to_string(b) + ".";
    Block blk;
    blk.norm1 = ag::LayerNorm::create(ps, n + "norm1", c);
    blk.qkv = ag::Linear::create(ps, n + "qkv", c, 3 * c, rng);
    blk.proj = ag::Linear::create(ps, n + "proj", c, c, rng, 0.5f);
    blk.norm2 = ag::LayerNorm::create(ps, n + "norm2", c);
    blk.fc1 = ag::Linear::create(ps, n + "fc1", c, cfg.mlp_ratio * c, rng);
    blk.fc2 = ag::Linear::create(ps, n + "fc2", cfg.mlp_ratio * c, c, rng, 0.5f);
    f.blocks_.push_back(blk);
  }
  f.norm_out_ = ag::LayerNorm::create(ps, "norm_out", c);
  // Zero head: training starts from uniform weights over the books.
  f.head_ = ag::Linear::create(ps, "head", c, books, rng, 0.0f);
  return f;
}

Var FusionNet::logits(const Var& z) const {
  const auto& s = z->value.shape();
  if (s.size() != 4 || s[1] != latent_dim_ || s[2] != latent_size_ || s[3] != latent_size_) {
    throw ag::ShapeError("fusion: latent " + ag::to_string(s) + " does not match the configured grid");
  }
  Var x = ag::add_broadcast(embed_(ag::nchw_to_tokens(z)), pos_);
  for (const auto& b : blocks_) {
    x = ag::add(x, b.proj(ag::multi_head_attention(b.qkv(b.norm1(x)), cfg_.heads)));
    x = ag::add(x, b.fc2(ag::silu(b.fc1(b.norm2(x)))));
  }
  return head_(norm_out_(x));
}

Var weights_from_logits(const Var& logits, int height, int width) {
  return ag::tokens_to_nchw(ag::softmax_last(logits), height, width);
}

Var FusionNet::operator()(const Var& z) const {
  return weights_from_logits(logits(z), latent_size_, latent_size_);
}

Var fuse(std::span<const Var> zq, const Var& weights) {
  const Tensor& w = weights->value;
  if (zq.empty() || w.rank() != 4 || static_cast<std::size_t>(w.dim(1)) != zq.size()) {
    throw ag::ShapeError("fuse: " + std::to_string(zq.size()) + " grids for weights " + ag::to_string(w.shape()));
  }
  const Tensor& first = zq[0]->value;
  for (const auto& g : zq) {
    ag::require_same_shape(g->value, first, "fuse");
  }
  if (first.dim(0) != w.dim(0) || first.dim(2) != w.dim(2) || first.dim(3) != w.dim(3)) {
    throw ag::ShapeError("fuse: grid " + ag::to_string(first.shape()) + " vs weights " + ag::to_string(w.shape()));
  }
  const int batch = first.dim(0), d = first.dim(1), hw = first.dim(2) * first.dim(3), k = w.dim(1);
  Tensor out(first.shape());
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < d; ++c)
      for (int t = 0; t < hw; ++t) {
        float acc = 0.0f;
        for (int j = 0; j < k; ++j) {
          acc += w[(static_cast<std::size_t>(b) * k + j) * hw + t] *
                 zq[static_cast<std::size_t>(j)]->value[(static_cast<std::size_t>(b) * d + c) * hw + t];
        }
        out[(static_cast<std::size_t>(b) * d + c) * hw + t] = acc;
      }
  std::vector<Var> parents(zq.begin(), zq.end());
  parents.push_back(weights);
  return ag::make_node(std::move(out), std::move(parents), [batch, d, hw, k](ag::Node& self) {
    const auto& wn = self.parents.back();
    for (int j = 0; j < k; ++j) {
      const auto& g = self.parents[static_cast<std::size_t>(j)];
      for (int b = 0; b < batch; ++b)
        for (int c = 0; c < d; ++c)
          for (int t = 0; t < hw; ++t) {
            const std::size_t zi = (static_cast<std::size_t>(b) * d + c) * hw + t;
            const std::size_t wi = (static_cast<std::size_t>(b) * k + j) * hw + t;
            if (g->requires_grad) g->grad_buffer()[zi] += self.grad[zi] * wn->value[wi];
            if (wn->requires_grad) wn->grad_buffer()[wi] += self.grad[zi] * g->value[zi];
          }
    }
  });
}

FusedLatent fused_latent(const ModelBundle& base, const CodebookBank& bank, const FusionNet& net, const Var& x) {
  FusedLatent out;
  out.z = base.encode(x);
  out.books = multi_quantize(out.z, bank);
  out.weights = net(out.z);
  std::vector<Var> zq;
  for (const auto& q : out.books) zq.push_back(q.values);
  out.fused = fuse(zq, out.weights);
  return out;
}

WeightSummary weight_summary(const Tensor& weights, const std::string& label) {
  if (weights.rank() != 4) throw ag::ShapeError("weight_summary: expected [B,K,h,w]");
  const int batch = weights.dim(0), k = weights.dim(1), hw = weights.dim(2) * weights.dim(3);
  WeightSummary s{label, std::vector<double>(static_cast<std::size_t>(k), 0.0)};
  for (int b = 0; b < batch; ++b)
    for (int j = 0; j < k; ++j)
      for (int t = 0; t < hw; ++t) s.mean[static_cast<std::size_t>(j)] += weights[(static_cast<std::size_t>(b) * k + j) * hw + t];
  for (auto& m : s.mean) m /= static_cast<double>(batch) * hw;
  return s;
}

}  // namespace idref
