// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/optim.hpp"

#include <cmath>

namespace idref::nn {

Adam::Adam(std::vector<Var> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(opt_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(opt_.beta2), static_cast<double>(t_));
  const float step = static_cast<float>(opt_.lr * std::sqrt(bc2) / bc1);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p->has_grad()) continue;
    float* w = p->value.data();
    const float* g = p->grad.data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::size_t j = 0; j < p->value.numel(); ++j) {
      m[j] = opt_.beta1 * m[j] + (1.0f - opt_.beta1) * g[j];
      v[j] = opt_.beta2 * v[j] + (1.0f - opt_.beta2) * g[j] * g[j];
      w[j] -= step * m[j] / (std::sqrt(v[j]) + opt_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p->grad = Tensor();
}

}  // namespace idref::nn
