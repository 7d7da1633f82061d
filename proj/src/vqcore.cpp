// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/vqcore.hpp"

#include <cmath>
#include <limits>

namespace idref {

using nlohmann::json;
namespace ag = idref::nn;

std::vector<int> VqConfig::tap_sizes() const {
  std::vector<int> sizes;
  for (int s = 0; s + 1 < levels(); ++s) sizes.push_back(latent_size() << s);
  return sizes;
}

void VqConfig::validate() const {
  if (levels() < 2) throw std::invalid_argument("vq config: need at least two levels");
  if (encoder_blocks.size() != channels.size() || decoder_blocks.size() != channels.size()) {
    throw std::invalid_argument("vq config: block counts must list one entry per level");
  }
  if (image_size % ratio() != 0) throw std::invalid_argument("vq config: image size not divisible by ratio");
  if (latent_dim <= 0 || codebook_size < 2) throw std::invalid_argument("vq config: bad codebook shape");
  if (codebook_init != "uniform" && codebook_init != "normal") {
    throw std::invalid_argument("vq config: unknown codebook_init '" + codebook_init + "'");
  }
}

json VqConfig::to_json() const {
  return {{"image_size", image_size},         {"latent_dim", latent_dim},
          {"codebook_size", codebook_size},   {"channels", channels},
          {"encoder_blocks", encoder_blocks}, {"decoder_blocks", decoder_blocks},
          {"groups", groups},                 {"codebook_init", codebook_init},
          {"init_scale", init_scale}};
}

VqConfig VqConfig::from_json(const json& j) {
  VqConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.channels = j.value("channels", c.channels);
  c.encoder_blocks = j.value("encoder_blocks", c.encoder_blocks);
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.groups = j.value("groups", c.groups);
  c.codebook_init = j.value("codebook_init", c.codebook_init);
  c.init_scale = j.value("init_scale", c.init_scale);
  c.validate();
  return c;
}

Encoder Encoder::create(nn::ParamSet& ps, const VqConfig& cfg, Rng& rng) {
  cfg.validate();
  Encoder e;
  e.cfg_ = cfg;
  const auto& ch = cfg.channels;
  e.conv_in_ = nn::Conv2d::create(ps, "conv_in", 3, ch[0], 3, 1, rng);
  e.blocks_.resize(ch.size());
  for (int l = 0; l < cfg.levels(); ++l) {
    const auto lu = static_cast<std::size_t>(l);
    if (l > 0) {
      e.down_.push_back(nn::Conv2d::create(ps, "down" + std::to_string(l), ch[lu - 1], ch[lu], 3, 2, rng));
    }
    for (int b = 0; b < cfg.encoder_blocks[lu]; ++b) {
      e.blocks_[lu].push_back(
          nn::ResBlock::create(ps, "level" + std::to_string(l) + ".block" + std::to_string(b), ch[lu], cfg.groups, rng));
    }
  }
  e.norm_out_ = nn::GroupNorm::create(ps, "norm_out", ch.back(), cfg.groups);
  e.conv_out_ = nn::Conv2d::create(ps, "conv_out", ch.back(), cfg.latent_dim, 1, 1, rng);
  return e;
}

Var Encoder::operator()(const Var& x) const {
  const auto& shape = x->value.shape();
  if (shape.size() != 4 || shape[1] != 3 || shape[2] != cfg_.image_size || shape[3] != cfg_.image_size) {
    throw nn::ShapeError("encode: expected [B,3," + std::to_string(cfg_.image_size) + "," +
                         std::to_string(cfg_.image_size) + "], got " + nn::to_string(shape));
  }
  Var h = conv_in_(x);
  for (int l = 0; l < cfg_.levels(); ++l) {
    if (l > 0) h = down_[static_cast<std::size_t>(l - 1)](h);
    for (const auto& block : blocks_[static_cast<std::size_t>(l)]) h = block(h);
  }
  return conv_out_(ag::silu(norm_out_(h)));
}

Decoder Decoder::create(nn::ParamSet& ps, const VqConfig& cfg, Rng& rng) {
  cfg.validate();
  Decoder d;
  d.cfg_ = cfg;
  const auto& ch = cfg.channels;
  const int top = cfg.levels() - 1;
  d.conv_in_ = nn::Conv2d::create(ps, "conv_in", cfg.latent_dim, ch[static_cast<std::size_t>(top)], 3, 1, rng);
  for (int b = 0; b < cfg.decoder_blocks[static_cast<std::size_t>(top)]; ++b) {
    d.mid_.push_back(nn::ResBlock::create(ps, "mid.block" + std::to_string(b), ch[static_cast<std::size_t>(top)],
                                          cfg.groups, rng));
  }
  for (int s = 0; s < top; ++s) {
    const auto from = static_cast<std::size_t>(top - s), to = from - 1;
    const std::string name = "stage" + std::to_string(s);
    d.up_.push_back(nn::Conv2d::create(ps, name + ".up", ch[from], ch[to], 3, 1, rng));
    d.blocks_.emplace_back();
    for (int b = 0; b < cfg.decoder_blocks[to]; ++b) {
      d.blocks_.back().push_back(nn::ResBlock::create(ps, name + ".block" + std::to_string(b), ch[to], cfg.groups, rng));
    }
  }
  d.norm_out_ = nn::GroupNorm::create(ps, "norm_out", ch[0], cfg.groups);
  d.conv_out_ = nn::Conv2d::create(ps, "conv_out", ch[0], 3, 3, 1, rng);
  return d;
}

std::vector<int> Decoder::stage_channels() const {
  std::vector<int> out;
  for (int s = 0; s + 1 < cfg_.levels(); ++s) out.push_back(cfg_.channels[static_cast<std::size_t>(cfg_.levels() - 2 - s)]);
  return out;
}

std::vector<int> Decoder::tap_channels() const {
  std::vector<int> out;
  for (int s = 0; s + 1 < cfg_.levels(); ++s) out.push_back(cfg_.channels[static_cast<std::size_t>(cfg_.levels() - 1 - s)]);
  return out;
}

Decoder::Output Decoder::operator()(const Var& zq, const InjectHook& hook) const {
  const auto& shape = zq->value.shape();
  const int h = cfg_.latent_size();
  if (shape.size() != 4 || shape[1] != cfg_.latent_dim || shape[2] != h || shape[3] != h) {
    throw nn::ShapeError("decode: expected [B," + std::to_string(cfg_.latent_dim) + "," + std::to_string(h) + "," +
                         std::to_string(h) + "], got " + nn::to_string(shape));
  }
  Output out;
  Var f = conv_in_(zq);
  for (const auto& block : mid_) f = block(f);
  for (std::size_t s = 0; s < up_.size(); ++s) {
    out.taps.push_back(f);
    Var up = up_[s](ag::upsample2x(f));
    if (hook) up = hook(static_cast<int>(s), f, up);
    for (const auto& block : blocks_[s]) up = block(up);
    f = up;
  }
  out.image = ag::sigmoid(conv_out_(ag::silu(norm_out_(f))));
  return out;
}

std::string to_string(CodebookTag tag) {
  switch (tag) {
    case CodebookTag::shared: return "shared";
    case CodebookTag::diffuse: return "diffuse";
    case CodebookTag::specular: return "specular";
    case CodebookTag::roughness: return "roughness";
    case CodebookTag::normal: return "normal";
    case CodebookTag::rgb_texture: return "rgb_texture";
  }
  throw std::invalid_argument("unknown codebook tag");
}

CodebookTag parse_codebook_tag(const std::string& s) {
  for (auto t : {CodebookTag::shared, CodebookTag::diffuse, CodebookTag::specular, CodebookTag::roughness,
                 CodebookTag::normal, CodebookTag::rgb_texture})
    if (to_string(t) == s) return t;
  throw std::invalid_argument("unknown codebook tag '" + s + "'");
}

Tensor init_codebook(const VqConfig& cfg, Rng& rng) {
  if (cfg.codebook_init == "normal") return nn::randn({cfg.codebook_size, cfg.latent_dim}, cfg.init_scale, rng);
  Tensor t({cfg.codebook_size, cfg.latent_dim});
  const double bound = 1.0 / cfg.codebook_size;
  for (auto& v : t.storage()) v = static_cast<float>(uniform(rng, -bound, bound));
  return t;
}

std::vector<int> nearest_codes(const Tensor& z, const Tensor& codebook) {
  if (z.rank() != 4) throw nn::ShapeError("quantize: latent must be [B,d,h,w], got " + nn::to_string(z.shape()));
  if (codebook.rank() != 2 || codebook.dim(1) != z.dim(1)) {
    throw nn::ShapeError("quantize: codebook " + nn::to_string(codebook.shape()) + " incompatible with latent " +
                         nn::to_string(z.shape()));
  }
  const int batch = z.dim(0), d = z.dim(1), hw = z.dim(2) * z.dim(3), n = codebook.dim(0);
  std::vector<int> indices(static_cast<std::size_t>(batch) * hw);
  std::vector<float> cell(static_cast<std::size_t>(d));
  const float* cb = codebook.data();
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < hw; ++t) {
      for (int c = 0; c < d; ++c) cell[static_cast<std::size_t>(c)] = z[(static_cast<std::size_t>(b) * d + c) * hw + t];
      double best = std::numeric_limits<double>::infinity();
      int best_index = 0;
      for (int k = 0; k < n; ++k) {
        const float* code = cb + static_cast<std::size_t>(k) * d;
        double dist = 0.0;
        int c = 0;
        // Partial sums only grow, so a code is abandoned once it is strictly
        // worse; equal distances run to completion and keep the lower index.
        for (; c < d && dist <= best; ++c) {
          const double diff = static_cast<double>(cell[static_cast<std::size_t>(c)]) - code[c];
          dist += diff * diff;
        }
        if (c == d && dist < best) {
          best = dist;
          best_index = k;
        }
      }
      indices[static_cast<std::size_t>(b) * hw + t] = best_index;
    }
  }
  return indices;
}

Quantized quantize(const Var& z, const Var& codebook) {
  Quantized q;
  q.indices = nearest_codes(z->value, codebook->value);
  q.values = ag::gather_codes(codebook, q.indices, z->value.dim(0), z->value.dim(2), z->value.dim(3));
  return q;
}

CodebookStats codebook_stats(std::span<const int> indices, int codebook_size) {
  if (indices.empty()) throw std::invalid_argument("codebook_stats: empty batch");
  CodebookStats s;
  s.histogram.assign(static_cast<std::size_t>(codebook_size), 0);
  for (int i : indices) {
    if (i < 0 || i >= codebook_size) throw std::out_of_range("codebook_stats: index out of range");
    ++s.histogram[static_cast<std::size_t>(i)];
  }
  double entropy = 0.0;
  const double total = static_cast<double>(indices.size());
  for (long count : s.histogram) {
    if (count == 0) continue;
    ++s.used;
    const double p = static_cast<double>(count) / total;
    entropy -= p * std::log(p);
  }
  s.perplexity = std::exp(entropy);
  return s;
}

int restart_dead_codes(Tensor& codebook, std::span<const long> usage, const Tensor& z, Rng& rng) {
  const int n = codebook.dim(0), d = codebook.dim(1);
  if (static_cast<int>(usage.size()) != n || z.rank() != 4 || z.dim(1) != d) {
    throw ag::ShapeError("restart_dead_codes: codebook " + ag::to_string(codebook.shape()) + " latent " +
                         ag::to_string(z.shape()));
  }
  const int hw = z.dim(2) * z.dim(3), cells = z.dim(0) * hw;
  std::vector<int> order = permutation(cells, rng);
  int restarted = 0;
  for (int k = 0; k < n; ++k) {
    if (usage[static_cast<std::size_t>(k)] != 0) continue;
    const int cell = order[static_cast<std::size_t>(restarted % cells)];
    const int b = cell / hw, t = cell % hw;
    for (int c = 0; c < d; ++c) {
      codebook[static_cast<std::size_t>(k) * d + c] = z[(static_cast<std::size_t>(b) * d + c) * hw + t];
    }
    ++restarted;
  }
  return restarted;
}

ModelBundle ModelBundle::create(const VqConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelBundle m;
  m.config = cfg;
  Rng rng(mix_seed(seed, 0x7a0));
  m.encoder = Encoder::create(m.encoder_params, cfg, rng);
  m.decoder = Decoder::create(m.decoder_params, cfg, rng);
  m.shared.codes = m.codebook_params.add("shared", init_codebook(cfg, rng));
  m.shared.tag = CodebookTag::shared;
  return m;
}

Var ModelBundle::encode(const Var& x) const { return encoder(x); }

Decoder::Output ModelBundle::decode(const Var& zq, const InjectHook& hook) const { return decoder(zq, hook); }

Decoder::Output ModelBundle::reconstruct(const Var& x) const {
  const Var z = encode(x);
  const Quantized q = quantize(z, shared.codes);
  return decode(ag::straight_through(z, q.values));
}

void ModelBundle::store(TensorMap& out) const {
  store_params(out, encoder_params, "encoder.");
  store_params(out, decoder_params, "decoder.");
  store_params(out, codebook_params, "codebook.");
}

void ModelBundle::load(const TensorMap& in) {
  load_params(in, encoder_params, "encoder.");
  load_params(in, decoder_params, "decoder.");
  load_params(in, codebook_params, "codebook.");
}

}  // namespace idref
