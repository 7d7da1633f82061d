// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "idref/autograd.hpp"
#include "idref/random.hpp"

namespace idref::nn {

using idref::Rng;

/// Named parameters of one network, in sorted name order.
class ParamSet {
 public:
  Var add(const std::string& name, Tensor init);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, Var>& items() const { return params_; }
  std::vector<Var> vars() const;
  std::size_t size() const { return params_.size(); }
  std::size_t numel() const;

  void set_trainable(bool trainable);
  void zero_grad();

  /// SHA-256 over names, shapes and raw values.
  std::string digest() const;

 private:
  std::map<std::string, Var> params_;
};

Tensor randn(const Shape& shape, float stddev, Rng& rng);

struct Conv2d {
  Var weight;
  Var bias;
  int stride = 1;
  int pad = 1;

  static Conv2d create(ParamSet& ps, const std::string& name, int in, int out, int kernel, int stride, Rng& rng,
                       float gain = 1.0f);
  Var operator()(const Var& x) const { return conv2d(x, weight, bias, stride, pad); }
};

struct Linear {
  Var weight;
  Var bias;

  static Linear create(ParamSet& ps, const std::string& name, int in, int out, Rng& rng, float gain = 1.0f);
  Var operator()(const Var& x) const { return linear(x, weight, bias); }
};

struct GroupNorm {
  Var gamma;
  Var beta;
  int groups = 1;

  static GroupNorm create(ParamSet& ps, const std::string& name, int channels, int groups);
  Var operator()(const Var& x) const { return group_norm(x, groups, gamma, beta); }
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm create(ParamSet& ps, const std::string& name, int dim);
  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};

/// Pre-activation residual block: x + conv(silu(gn(conv(silu(gn(x)))))).
struct ResBlock {
  GroupNorm norm1;
  Conv2d conv1;
  GroupNorm norm2;
  Conv2d conv2;

  static ResBlock create(ParamSet& ps, const std::string& name, int channels, int groups, Rng& rng);
  Var operator()(const Var& x) const;
};

/// Largest group count <= preferred that divides channels.
int group_count(int channels, int preferred);

}  // namespace idref::nn
