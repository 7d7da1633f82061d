// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/layers.hpp"

#include <cmath>
#include <numbers>

#include "idref/digest.hpp"

namespace idref::nn {

Var ParamSet::add(const std::string& name, Tensor init) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Var v = parameter(std::move(init));
  params_.emplace(name, v);
  return v;
}

const Var& ParamSet::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::vector<Var> ParamSet::vars() const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& [_, v] : params_) out.push_back(v);
  return out;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& [_, v] : params_) n += v->value.numel();
  return n;
}

void ParamSet::set_trainable(bool trainable) {
  for (auto& [_, v] : params_) v->requires_grad = trainable;
}

void ParamSet::zero_grad() {
  for (auto& [_, v] : params_) v->grad = Tensor();
}

std::string ParamSet::digest() const {
  Sha256 h;
  for (const auto& [name, v] : params_) {
    h.update(name);
    h.update(to_string(v->value.shape()));
    h.update(v->value.data(), v->value.numel() * sizeof(float));
  }
  return h.finish();
}

Tensor randn(const Shape& shape, float stddev, Rng& rng) {
  // Box-Muller over the vendor-independent uniform draw.
  Tensor t(shape);
  auto& out = t.storage();
  for (std::size_t i = 0; i < out.size(); i += 2) {
    const double u1 = 1.0 - unit_uniform(rng);
    const double u2 = unit_uniform(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    out[i] = static_cast<float>(stddev * r * std::cos(2.0 * std::numbers::pi * u2));
    if (i + 1 < out.size()) out[i + 1] = static_cast<float>(stddev * r * std::sin(2.0 * std::numbers::pi * u2));
  }
  return t;
}

int group_count(int channels, int preferred) {
  for (int g = std::min(preferred, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

Conv2d Conv2d::create(ParamSet& ps, const std::string& name, int in, int out, int kernel, int stride, Rng& rng,
                      float gain) {
  const float std = gain * std::sqrt(2.0f / static_cast<float>(in * kernel * kernel));
  Conv2d c;
  c.weight = ps.add(name + ".weight", randn({out, in, kernel, kernel}, std, rng));
  c.bias = ps.add(name + ".bias", Tensor({out}));
  c.stride = stride;
  c.pad = kernel / 2;
  return c;
}

Linear Linear::create(ParamSet& ps, const std::string& name, int in, int out, Rng& rng, float gain) {
  const float std = gain * std::sqrt(1.0f / static_cast<float>(in));
  Linear l;
  l.weight = ps.add(name + ".weight", randn({out, in}, std, rng));
  l.bias = ps.add(name + ".bias", Tensor({out}));
  return l;
}

GroupNorm GroupNorm::create(ParamSet& ps, const std::string& name, int channels, int groups) {
  GroupNorm g;
  g.gamma = ps.add(name + ".gamma", Tensor({channels}, 1.0f));
  g.beta = ps.add(name + ".beta", Tensor({channels}));
  g.groups = group_count(channels, groups);
  return g;
}

LayerNorm LayerNorm::create(ParamSet& ps, const std::string& name, int dim) {
  LayerNorm l;
  l.gamma = ps.add(name + ".gamma", Tensor({dim}, 1.0f));
  l.beta = ps.add(name + ".beta", Tensor({dim}));
  return l;
}

ResBlock ResBlock::create(ParamSet& ps, const std::string& name, int channels, int groups, Rng& rng) {
  ResBlock r;
  r.norm1 = GroupNorm::create(ps, name + ".norm1", channels, groups);
  r.conv1 = Conv2d::create(ps, name + ".conv1", channels, channels, 3, 1, rng);
  r.norm2 = GroupNorm::create(ps, name + ".norm2", channels, groups);
  r.conv2 = Conv2d::create(ps, name + ".conv2", channels, channels, 3, 1, rng, 0.3f);
  return r;
}

Var ResBlock::operator()(const Var& x) const {
  Var h = conv1(silu(norm1(x)));
  h = conv2(silu(norm2(h)));
  return add(x, h);
}

}  // namespace idref::nn
