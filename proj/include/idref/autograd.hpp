// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "idref/tensor.hpp"

namespace idref::nn {

struct Node;
using Var = std::shared_ptr<Node>;

/// A value in the computation graph. Parameters are long-lived leaf nodes;
/// intermediate nodes keep their parents alive until the graph is dropped.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();
  bool has_grad() const { return !grad.empty(); }
};

Var constant(Tensor value);
Var parameter(Tensor value);

/// Records an op result. The backward closure is kept only when gradient
/// recording is enabled and at least one parent requires a gradient.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Reverse-mode sweep from a scalar root (seed 1) or with an explicit seed.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise arithmetic. Shapes must match exactly.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// x + y with y repeated along x's leading axis.
Var add_broadcast(const Var& x, const Var& y);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, float s);
Var add_scalar(const Var& x, float s);
Var square(const Var& x);
Var abs(const Var& x);
Var log(const Var& x);
Var clamp(const Var& x, float lo, float hi);
Var detach(const Var& x);

// Activations.
Var leaky_relu(const Var& x, float slope);
Var silu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);

// Reductions (fixed ascending order, double accumulation).
Var sum(const Var& x);
Var mean(const Var& x);
Var l1_mean(const Var& a, const Var& b);
Var mse_mean(const Var& a, const Var& b);

// Convolution and dense layers.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
Var linear(const Var& x, const Var& weight, const Var& bias);

// Normalization.
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, float eps = 1e-5f);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
/// Per-(sample, channel) standardization (x - mean) / (std + eps) with the
/// population standard deviation.
Var instance_standardize(const Var& x, float eps = 1e-5f);
Var mul_channel(const Var& x, const Var& s);
Var add_channel(const Var& x, const Var& b);

// Resampling and layout.
Var upsample2x(const Var& x);
Var avg_pool2x(const Var& x);
Var global_avg_pool(const Var& x);
Var reshape(const Var& x, Shape shape);
Var nchw_to_tokens(const Var& x);
Var tokens_to_nchw(const Var& x, int height, int width);
Var slice0(const Var& x, int begin, int end);

// Attention and classification helpers.
Var softmax_last(const Var& x);
Var multi_head_attention(const Var& qkv, int heads);
Var l2_normalize_rows(const Var& x, float eps = 1e-12f);
Var row_dot(const Var& a, const Var& b);
/// Row-wise cosine similarity computed in double precision. Zero rows throw.
Var cosine_rows(const Var& a, const Var& b);
Var cross_entropy(const Var& logits, std::span<const int> labels);

// Vector quantization plumbing.
/// Forward value of zq, gradient routed to z unchanged.
Var straight_through(const Var& z, const Var& zq);
/// Gathers codebook rows into an NCHW grid; gradients scatter back to rows.
Var gather_codes(const Var& codebook, std::span<const int> indices, int batch, int height, int width);

}  // namespace idref::nn
