// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/swapper.hpp"

#include <algorithm>

#include "idref/random.hpp"

namespace idref {

namespace ag = idref::nn;
using nlohmann::json;

json EmbedderConfig::to_json() const {
  return {{"input_size", input_size}, {"embed_dim", embed_dim}, {"widths", widths}, {"scale", scale}};
}

EmbedderConfig EmbedderConfig::from_json(const json& j) {
  EmbedderConfig c;
  c.input_size = j.value("input_size", c.input_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.widths = j.value("widths", c.widths);
  c.scale = j.value("scale", c.scale);
  const int cells = c.input_size >> c.widths.size();
  if (c.widths.empty() || cells < 1 || (cells << c.widths.size()) != c.input_size || c.embed_dim <= 0) {
    throw SwapperError("embedder: input size must be a multiple of 2^levels");
  }
  return c;
}

Embedder Embedder::create(ag::ParamSet& ps, const EmbedderConfig& cfg, Rng& rng) {
  Embedder e;
  e.cfg_ = cfg;
  int in = 3;
  for (std::size_t l = 0; l < cfg.widths.size(); ++l) {
    const std::string n = "level" + std::to_string(l) + ".";
    Level lv;
    lv.down = ag::Conv2d::create(ps, n + "down", in, cfg.widths[l], 3, 2, rng);
    lv.conv = ag::Conv2d::create(ps, n + "conv", cfg.widths[l], cfg.widths[l], 3, 1, rng);
    e.levels_.push_back(lv);
    in = cfg.widths[l];
  }
  const int cells = cfg.input_size >> cfg.widths.size();
  e.head_ = ag::Linear::create(ps, "head", in * cells * cells, cfg.embed_dim, rng);
  return e;
}

Var Embedder::operator()(const Var& x) const {
  const auto& s = x->value.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.input_size || s[3] != cfg_.input_size) {
    throw ag::ShapeError("embedder: expected [B,3," + std::to_string(cfg_.input_size) + "," +
                         std::to_string(cfg_.input_size) + "], got " + ag::to_string(s));
  }
  Var h = ag::add_scalar(ag::scale(x, 2.0f), -1.0f);
  for (const auto& lv : levels_) {
    h = ag::leaky_relu(lv.down(h), 0.2f);
    h = ag::leaky_relu(lv.conv(h), 0.2f);
  }
  const auto& hs = h->value.shape();
  h = ag::reshape(h, {hs[0], hs[1] * hs[2] * hs[3]});
  return ag::l2_normalize_rows(head_(h));
}

Var Embedder::class_logits(const Var& embeddings, const Var& class_weights) const {
  return ag::scale(ag::linear(embeddings, ag::l2_normalize_rows(class_weights), nullptr), cfg_.scale);
}

std::vector<float> embed_identity(const DomainImage& face, const Embedder& embedder) {
  if (face.domain != Domain::rgb) {
    throw SwapperError("embed_identity: expected an rgb face, got " + to_string(face.domain));
  }
  const int s = embedder.config().input_size;
  const Image& img = face.pixels.height == s && face.pixels.width == s ? face.pixels : resize(face.pixels, s, s);
  ag::NoGradGuard no_grad;
  const Var e = embedder(ag::constant(to_tensor(img)));
  return e->value.storage();
}

std::vector<float> oracle_embedding(const IdentityParams& identity, int dim) {
  Rng rng(mix_seed(0x1de7'0f5eULL, static_cast<std::uint64_t>(identity.id)));
  Tensor v = ag::randn({dim}, 1.0f, rng);
  double n2 = 0.0;
  for (float x : v.storage()) n2 += static_cast<double>(x) * x;
  const double inv = 1.0 / std::sqrt(n2);
  std::vector<float> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim; ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(v[static_cast<std::size_t>(i)] * inv);
  return out;
}

Var adain(const Var& f, const Var& sigma, const Var& mu, float eps) {
  return ag::add_channel(ag::mul_channel(ag::instance_standardize(f, eps), sigma), mu);
}

SwapperConfig SwapperConfig::defaults_for(const VqConfig& vq, int embed_dim) {
  SwapperConfig c;
  auto taps = vq.tap_sizes();
  taps.pop_back();
  c.scales = taps;
  c.embed_dim = embed_dim;
  return c;
}

json SwapperConfig::to_json() const { return {{"scales", scales}, {"embed_dim", embed_dim}, {"slope", slope}}; }

SwapperConfig SwapperConfig::from_json(const json& j, const VqConfig& vq) {
  SwapperConfig c = defaults_for(vq, j.value("embed_dim", 64));
  c.scales = j.value("scales", c.scales);
  c.slope = j.value("slope", c.slope);
  return c;
}

SwapperBranch SwapperBranch::create(ag::ParamSet& ps, const std::string& name, int tap_size, int in_channels,
                                    int out_channels, int embed_dim, float slope, Rng& rng) {
  SwapperBranch b;
  b.tap_size_ = tap_size;
  b.slope_ = slope;
  for (int i = 0; i < 3; ++i) {
    const std::string n = name + ".block" + std::to_string(i) + ".";
    Block blk;
    blk.conv = ag::Conv2d::create(ps, n + "conv", in_channels, in_channels, 3, 1, rng);
    blk.to_sigma = ag::Linear::create(ps, n + "to_sigma", embed_dim, in_channels, rng);
    blk.to_mu = ag::Linear::create(ps, n + "to_mu", embed_dim, in_channels, rng);
    b.blocks_.push_back(blk);
  }
  b.out_ = ag::Conv2d::create(ps, name + ".out", in_channels, out_channels, 1, 1, rng, 0.0f);
  return b;
}

Var SwapperBranch::operator()(const Var& tap, const Var& z_id) const {
  Var h = tap;
  for (const auto& blk : blocks_) {
    const Var sigma = ag::add_scalar(blk.to_sigma(z_id), 1.0f);
    h = ag::leaky_relu(adain(blk.conv(h), sigma, blk.to_mu(z_id)), slope_);
  }
  return out_(ag::upsample2x(h));
}

Swapper Swapper::create(ag::ParamSet& ps, const SwapperConfig& cfg, const VqConfig& vq, const Decoder& decoder,
                        Rng& rng) {
  const auto taps = vq.tap_sizes();
  const auto tap_ch = decoder.tap_channels();
  const auto stage_ch = decoder.stage_channels();
  Swapper s;
  s.cfg_ = cfg;
  for (int scale : cfg.scales) {
    const auto it = std::find(taps.begin(), taps.end(), scale);
    if (it == taps.end()) {
      throw SwapperError("swapper: scale " + std::to_string(scale) + " is not a decoder tap scale");
    }
    const auto stage = static_cast<std::size_t>(it - taps.begin());
    s.branches_.push_back(SwapperBranch::create(ps, "branch" + std::to_string(scale), scale, tap_ch[stage],
                                                stage_ch[stage], cfg.embed_dim, cfg.slope, rng));
  }
  return s;
}

InjectHook Swapper::hook(const Var& z_id) const {
  if (z_id->value.rank() != 2 || z_id->value.dim(1) != cfg_.embed_dim) {
    throw SwapperError("swapper: identity embedding " + ag::to_string(z_id->value.shape()) + " expected [B," +
                       std::to_string(cfg_.embed_dim) + "]");
  }
  return [this, z_id](int, const Var& tap, const Var& upsampled) -> Var {
    const int size = tap->value.dim(2);
    for (const auto& b : branches_) {
      if (b.tap_size() == size) return ag::add(upsampled, b(tap, z_id));
    }
    return upsampled;
  };
}

void SwapModels::require_complete() const {
  std::vector<std::string> missing;
  if (!base) missing.push_back("autoencoder");
  if (!bank) missing.push_back("codebook bank");
  if (!fusion) missing.push_back("fusion");
  if (!embedder) missing.push_back("embedder");
  if (!swapper) missing.push_back("swapper");
  if (missing.empty()) return;
  std::string msg = "swap: missing components:";
  for (const auto& m : missing) msg += " " + m;
  throw SwapperError(msg);
}

Decoder::Output swap_forward(const Var& x, const Var& z_id, const SwapModels& models) {
  models.require_complete();
  const FusedLatent lat = fused_latent(*models.base, *models.bank, *models.fusion, x);
  return models.base->decode(lat.fused, models.swapper->hook(z_id));
}

DomainImage swap(const DomainImage& target, const DomainImage& id_face, const SwapModels& models) {
  models.require_complete();
  const std::vector<float> e = embed_identity(id_face, *models.embedder);
  const int size = models.base->config.image_size;
  const Image& img =
      target.pixels.height == size && target.pixels.width == size ? target.pixels : resize(target.pixels, size, size);
  ag::NoGradGuard no_grad;
  Tensor zt({1, static_cast<int>(e.size())});
  std::copy(e.begin(), e.end(), zt.storage().begin());
  const auto out = swap_forward(ag::constant(to_tensor(img)), ag::constant(std::move(zt)), models);
  Image result = from_tensor(out.image->value);
  if (result.height != target.pixels.height || result.width != target.pixels.width) {
    result = resize(result, target.pixels.height, target.pixels.width);
  }
  return {std::move(result), target.domain, target.view, target.identity_id};
}

}  // namespace idref
