// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "idref/autograd.hpp"

namespace idref::nn {

struct AdamOptions {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Adaptive-moment optimizer over a fixed parameter list. Parameters that
/// received no gradient in a step are left untouched.
class Adam {
 public:
  Adam(std::vector<Var> params, AdamOptions options);

  void step();
  void zero_grad();
  long steps() const { return t_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamOptions opt_;
  long t_ = 0;
};

}  // namespace idref::nn
