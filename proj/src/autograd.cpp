// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace idref::nn {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

thread_local bool g_grad_enabled = true;

bool wants(const Var& v) { return v && v->requires_grad; }

void check_same(const Var& a, const Var& b, const char* what) { require_same_shape(a->value, b->value, what); }

template <typename F>
Var unary(const Var& x, F&& f, std::function<void(Node&)> bw) {
  Tensor out(x->value.shape());
  const float* src = x->value.data();
  float* dst = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) dst[i] = f(src[i]);
  return make_node(std::move(out), {x}, std::move(bw));
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty() || grad.shape() != value.shape()) grad = Tensor(value.shape());
  return grad;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled && std::any_of(parents.begin(), parents.end(), wants)) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  if (root->value.numel() != 1) throw ShapeError("backward() without seed needs a scalar root");
  backward(root, Tensor(root->value.shape(), 1.0f));
}

void backward(const Var& root, const Tensor& seed) {
  require_same_shape(root->value, seed, "backward seed");
  if (!root->requires_grad) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer().add_(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  Tensor out = a->value;
  out.add_(b->value);
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad_buffer().add_(self.grad);
  });
}

Var add_broadcast(const Var& x, const Var& y) {
  const Shape& xs = x->value.shape();
  if (xs.size() < 2 || Shape(xs.begin() + 1, xs.end()) != y->value.shape()) {
    throw ShapeError("add_broadcast: " + to_string(xs) + " vs " + to_string(y->value.shape()));
  }
  Tensor out = x->value;
  const std::size_t per = y->value.numel();
  for (int n = 0; n < xs[0]; ++n)
    for (std::size_t i = 0; i < per; ++i) out[static_cast<std::size_t>(n) * per + i] += y->value[i];
  return make_node(std::move(out), {x, y}, [per](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad_buffer().add_(self.grad);
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      const std::size_t rows = self.grad.numel() / per;
      for (std::size_t n = 0; n < rows; ++n)
        for (std::size_t i = 0; i < per; ++i) g[i] += self.grad[n * per + i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same(a, b, "sub");
  Tensor out = a->value;
  out.add_(b->value, -1.0f);
  return make_node(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad_buffer().add_(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->grad_buffer().add_(self.grad, -1.0f);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const auto& a = self.parents[0];
    const auto& b = self.parents[1];
    if (a->requires_grad) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

Var scale(const Var& x, float s) {
  return unary(x, [s](float v) { return v * s; }, [s](Node& self) { self.parents[0]->grad_buffer().add_(self.grad, s); });
}

Var add_scalar(const Var& x, float s) {
  return unary(x, [s](float v) { return v + s; }, [](Node& self) { self.parents[0]->grad_buffer().add_(self.grad); });
}

Var square(const Var& x) {
  return unary(x, [](float v) { return v * v; }, [](Node& self) {
    const auto& x = self.parents[0];
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += 2.0f * x->value[i] * self.grad[i];
  });
}

Var abs(const Var& x) {
  return unary(x, [](float v) { return std::fabs(v); }, [](Node& self) {
    const auto& x = self.parents[0];
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const float v = x->value[i];
      g[i] += (v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f)) * self.grad[i];
    }
  });
}

Var log(const Var& x) {
  return unary(x, [](float v) { return std::log(v); }, [](Node& self) {
    const auto& x = self.parents[0];
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / x->value[i];
  });
}

Var clamp(const Var& x, float lo, float hi) {
  return unary(x, [lo, hi](float v) { return std::clamp(v, lo, hi); }, [lo, hi](Node& self) {
    const auto& x = self.parents[0];
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const float v = x->value[i];
      if (v >= lo && v <= hi) g[i] += self.grad[i];
    }
  });
}

Var detach(const Var& x) { return constant(x->value); }

Var leaky_relu(const Var& x, float slope) {
  return unary(x, [slope](float v) { return v > 0.0f ? v : slope * v; }, [slope](Node& self) {
    const auto& x = self.parents[0];
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += (x->value[i] > 0.0f ? 1.0f : slope) * self.grad[i];
  });
}

Var silu(const Var& x) {
  return unary(x, [](float v) { return v / (1.0f + std::exp(-v)); }, [](Node& self) {
    const auto& x = self.parents[0];
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const float v = x->value[i];
      const float s = 1.0f / (1.0f + std::exp(-v));
      g[i] += self.grad[i] * (s * (1.0f + v * (1.0f - s)));
    }
  });
}

Var sigmoid(const Var& x) {
  return unary(x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); }, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const float y = self.value[i];
      g[i] += self.grad[i] * y * (1.0f - y);
    }
  });
}

Var tanh(const Var& x) {
  return unary(x, [](float v) { return std::tanh(v); }, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const float y = self.value[i];
      g[i] += self.grad[i] * (1.0f - y * y);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& x) {
  double acc = 0.0;
  for (float v : x->value.values()) acc += v;
  return make_node(Tensor({1}, static_cast<float>(acc)), {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const float s = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s;
  });
}

Var mean(const Var& x) {
  const std::size_t n = x->value.numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  double acc = 0.0;
  for (float v : x->value.values()) acc += v;
  return make_node(Tensor({1}, static_cast<float>(acc / static_cast<double>(n))), {x}, [n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const float s = self.grad[0] / static_cast<float>(n);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s;
  });
}

Var l1_mean(const Var& a, const Var& b) {
  check_same(a, b, "l1_mean");
  const std::size_t n = a->value.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::fabs(static_cast<double>(a->value[i]) - b->value[i]);
  return make_node(Tensor({1}, static_cast<float>(acc / static_cast<double>(n))), {a, b}, [n](Node& self) {
    const auto& a = self.parents[0];
    const auto& b = self.parents[1];
    const float s = self.grad[0] / static_cast<float>(n);
    for (int side = 0; side < 2; ++side) {
      const auto& p = self.parents[static_cast<std::size_t>(side)];
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      const float sign = side == 0 ? 1.0f : -1.0f;
      for (std::size_t i = 0; i < n; ++i) {
        const float d = a->value[i] - b->value[i];
        g[i] += sign * s * (d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f));
      }
    }
  });
}

Var mse_mean(const Var& a, const Var& b) {
  check_same(a, b, "mse_mean");
  const std::size_t n = a->value.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a->value[i]) - b->value[i];
    acc += d * d;
  }
  return make_node(Tensor({1}, static_cast<float>(acc / static_cast<double>(n))), {a, b}, [n](Node& self) {
    const auto& a = self.parents[0];
    const auto& b = self.parents[1];
    const float s = 2.0f * self.grad[0] / static_cast<float>(n);
    if (a->requires_grad) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += s * (a->value[i] - b->value[i]);
    }
    if (b->requires_grad) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= s * (a->value[i] - b->value[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

void im2col(const float* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, float* col) {
  const int plane = ho * wo;
  for (int ci = 0; ci < c; ++ci) {
    const float* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          float* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0f);
            continue;
          }
          const float* src = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo, float* x) {
  const int plane = ho * wo;
  for (int ci = 0; ci < c; ++ci) {
    float* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const float* src = row + oy * wo;
          float* dst = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3)) {
    throw ShapeError("conv2d: input " + to_string(xv.shape()) + " weight " + to_string(wv.shape()));
  }
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int o = wv.dim(0), k = wv.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for input " + to_string(xv.shape()));
  if (bias) require_shape(bias->value, {o}, "conv2d bias");
  const int ckk = c * k * k;
  const int plane = ho * wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  const bool record = g_grad_enabled && (wants(x) || wants(weight) || wants(bias));

  Tensor out({n, o, ho, wo});
  auto cols = std::make_shared<std::vector<float>>();
  std::vector<float> scratch;
  if (!direct) {
    if (record && wants(weight)) {
      cols->resize(static_cast<std::size_t>(n) * ckk * plane);
    } else {
      scratch.resize(static_cast<std::size_t>(ckk) * plane);
    }
  }
  CMapR wm(wv.data(), o, ckk);
  for (int b = 0; b < n; ++b) {
    const float* xb = xv.data() + static_cast<std::size_t>(b) * c * h * w;
    const float* colp = xb;
    if (!direct) {
      float* dst = cols->empty() ? scratch.data() : cols->data() + static_cast<std::size_t>(b) * ckk * plane;
      im2col(xb, c, h, w, k, stride, pad, ho, wo, dst);
      colp = dst;
    }
    MapR ym(out.data() + static_cast<std::size_t>(b) * o * plane, o, plane);
    ym.noalias() = wm * CMapR(colp, ckk, plane);
    if (bias) {
      for (int oc = 0; oc < o; ++oc) ym.row(oc).array() += bias->value[static_cast<std::size_t>(oc)];
    }
  }

  return make_node(std::move(out), {x, weight, bias ? bias : constant(Tensor({0}))},
                   [cols, n, c, h, w, o, k, stride, pad, ho, wo, ckk, plane, direct](Node& self) {
                     const auto& x = self.parents[0];
                     const auto& weight = self.parents[1];
                     const auto& bias = self.parents[2];
                     const float* gy = self.grad.data();
                     if (bias->requires_grad) {
                       auto& gb = bias->grad_buffer();
                       for (int b = 0; b < n; ++b)
                         for (int oc = 0; oc < o; ++oc) {
                           const float* row = gy + (static_cast<std::size_t>(b) * o + oc) * plane;
                           double acc = 0.0;
                           for (int p = 0; p < plane; ++p) acc += row[p];
                           gb[static_cast<std::size_t>(oc)] += static_cast<float>(acc);
                         }
                     }
                     if (weight->requires_grad) {
                       MapR gw(weight->grad_buffer().data(), o, ckk);
                       for (int b = 0; b < n; ++b) {
                         const float* colp = direct ? x->value.data() + static_cast<std::size_t>(b) * c * h * w
                                                    : cols->data() + static_cast<std::size_t>(b) * ckk * plane;
                         gw.noalias() += CMapR(gy + static_cast<std::size_t>(b) * o * plane, o, plane) *
                                         CMapR(colp, ckk, plane).transpose();
                       }
                     }
                     if (x->requires_grad) {
                       auto& gx = x->grad_buffer();
                       CMapR wm(weight->value.data(), o, ckk);
                       MatR dcol(ckk, plane);
                       for (int b = 0; b < n; ++b) {
                         float* gxb = gx.data() + static_cast<std::size_t>(b) * c * h * w;
                         CMapR gyb(gy + static_cast<std::size_t>(b) * o * plane, o, plane);
                         if (direct) {
                           MapR(gxb, ckk, plane).noalias() += wm.transpose() * gyb;
                         } else {
                           dcol.noalias() = wm.transpose() * gyb;
                           col2im(dcol.data(), c, h, w, k, stride, pad, ho, wo, gxb);
                         }
                       }
                     }
                   });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  if (wv.rank() != 2 || xv.rank() < 1 || xv.dim(-1) != wv.dim(1)) {
    throw ShapeError("linear: input " + to_string(xv.shape()) + " weight " + to_string(wv.shape()));
  }
  const int in = wv.dim(1), outf = wv.dim(0);
  const int rows = static_cast<int>(xv.numel() / static_cast<std::size_t>(in));
  if (bias) require_shape(bias->value, {outf}, "linear bias");
  Shape os = xv.shape();
  os.back() = outf;
  Tensor out(os);
  MapR ym(out.data(), rows, outf);
  ym.noalias() = CMapR(xv.data(), rows, in) * CMapR(wv.data(), outf, in).transpose();
  if (bias) {
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < outf; ++j) ym(r, j) += bias->value[static_cast<std::size_t>(j)];
  }
  return make_node(std::move(out), {x, weight, bias ? bias : constant(Tensor({0}))}, [rows, in, outf](Node& self) {
    const auto& x = self.parents[0];
    const auto& weight = self.parents[1];
    const auto& bias = self.parents[2];
    CMapR gy(self.grad.data(), rows, outf);
    if (x->requires_grad) {
      MapR(x->grad_buffer().data(), rows, in).noalias() += gy * CMapR(weight->value.data(), outf, in);
    }
    if (weight->requires_grad) {
      MapR(weight->grad_buffer().data(), outf, in).noalias() += gy.transpose() * CMapR(x->value.data(), rows, in);
    }
    if (bias->requires_grad) {
      auto& gb = bias->grad_buffer();
      for (int j = 0; j < outf; ++j) {
        double acc = 0.0;
        for (int r = 0; r < rows; ++r) acc += gy(r, j);
        gb[static_cast<std::size_t>(j)] += static_cast<float>(acc);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, float eps) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4 || xv.dim(1) % groups != 0) {
    throw ShapeError("group_norm: input " + to_string(xv.shape()) + " groups " + std::to_string(groups));
  }
  const int n = xv.dim(0), c = xv.dim(1);
  const int hw = xv.dim(2) * xv.dim(3);
  const int cg = c / groups;
  require_shape(gamma->value, {c}, "group_norm gamma");
  require_shape(beta->value, {c}, "group_norm beta");
  Tensor out(xv.shape());
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto rstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n) * groups);
  const std::size_t count = static_cast<std::size_t>(cg) * hw;
  for (int b = 0; b < n; ++b) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + static_cast<std::size_t>(g) * cg) * hw;
      double m = 0.0;
      for (std::size_t i = 0; i < count; ++i) m += xv[base + i];
      m /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        const double d = xv[base + i] - m;
        var += d * d;
      }
      var /= static_cast<double>(count);
      const float r = static_cast<float>(1.0 / std::sqrt(var + eps));
      (*rstd)[static_cast<std::size_t>(b) * groups + g] = r;
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = g * cg + cc;
        const float ga = gamma->value[static_cast<std::size_t>(ch)];
        const float be = beta->value[static_cast<std::size_t>(ch)];
        for (int p = 0; p < hw; ++p) {
          const std::size_t i = base + static_cast<std::size_t>(cc) * hw + p;
          const float xh = static_cast<float>((xv[i] - m) * r);
          (*xhat)[i] = xh;
          out[i] = xh * ga + be;
        }
      }
    }
  }
  return make_node(std::move(out), {x, gamma, beta}, [xhat, rstd, n, c, hw, cg, groups, count](Node& self) {
    const auto& x = self.parents[0];
    const auto& gamma = self.parents[1];
    const auto& beta = self.parents[2];
    const Tensor& gy = self.grad;
    if (gamma->requires_grad || beta->requires_grad) {
      auto& gg = gamma->grad_buffer();
      auto& gb = beta->grad_buffer();
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
          double sg = 0.0, sb = 0.0;
          for (int p = 0; p < hw; ++p) {
            sg += gy[base + p] * (*xhat)[base + p];
            sb += gy[base + p];
          }
          if (gamma->requires_grad) gg[static_cast<std::size_t>(ch)] += static_cast<float>(sg);
          if (beta->requires_grad) gb[static_cast<std::size_t>(ch)] += static_cast<float>(sb);
        }
    }
    if (!x->requires_grad) return;
    auto& gx = x->grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int g = 0; g < groups; ++g) {
        const std::size_t base = (static_cast<std::size_t>(b) * c + static_cast<std::size_t>(g) * cg) * hw;
        double m1 = 0.0, m2 = 0.0;
        for (int cc = 0; cc < cg; ++cc) {
          const float ga = gamma->value[static_cast<std::size_t>(g * cg + cc)];
          for (int p = 0; p < hw; ++p) {
            const std::size_t i = base + static_cast<std::size_t>(cc) * hw + p;
            const double dxh = gy[i] * ga;
            m1 += dxh;
            m2 += dxh * (*xhat)[i];
          }
        }
        m1 /= static_cast<double>(count);
        m2 /= static_cast<double>(count);
        const float r = (*rstd)[static_cast<std::size_t>(b) * groups + g];
        for (int cc = 0; cc < cg; ++cc) {
          const float ga = gamma->value[static_cast<std::size_t>(g * cg + cc)];
          for (int p = 0; p < hw; ++p) {
            const std::size_t i = base + static_cast<std::size_t>(cc) * hw + p;
            gx[i] += static_cast<float>(r * (gy[i] * ga - m1 - (*xhat)[i] * m2));
          }
        }
      }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const Tensor& xv = x->value;
  const int d = xv.dim(-1);
  const int rows = static_cast<int>(xv.numel() / static_cast<std::size_t>(d));
  require_shape(gamma->value, {d}, "layer_norm gamma");
  require_shape(beta->value, {d}, "layer_norm beta");
  Tensor out(xv.shape());
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto rstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * d;
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += xv[base + j];
    m /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double t = xv[base + j] - m;
      var += t * t;
    }
    var /= d;
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (int j = 0; j < d; ++j) {
      const float xh = static_cast<float>((xv[base + j] - m) * rs);
      (*xhat)[base + j] = xh;
      out[base + j] = xh * gamma->value[static_cast<std::size_t>(j)] + beta->value[static_cast<std::size_t>(j)];
    }
  }
  return make_node(std::move(out), {x, gamma, beta}, [xhat, rstd, rows, d](Node& self) {
    const auto& x = self.parents[0];
    const auto& gamma = self.parents[1];
    const auto& beta = self.parents[2];
    const Tensor& gy = self.grad;
    if (gamma->requires_grad || beta->requires_grad) {
      auto& gg = gamma->grad_buffer();
      auto& gb = beta->grad_buffer();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) {
          const std::size_t i = static_cast<std::size_t>(r) * d + j;
          if (gamma->requires_grad) gg[static_cast<std::size_t>(j)] += gy[i] * (*xhat)[i];
          if (beta->requires_grad) gb[static_cast<std::size_t>(j)] += gy[i];
        }
    }
    if (!x->requires_grad) return;
    auto& gx = x->grad_buffer();
    for (int r = 0; r < rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * d;
      double m1 = 0.0, m2 = 0.0;
      for (int j = 0; j < d; ++j) {
        const double dxh = gy[base + j] * gamma->value[static_cast<std::size_t>(j)];
        m1 += dxh;
        m2 += dxh * (*xhat)[base + j];
      }
      m1 /= d;
      m2 /= d;
      const float rs = (*rstd)[static_cast<std::size_t>(r)];
      for (int j = 0; j < d; ++j) {
        const double dxh = gy[base + j] * gamma->value[static_cast<std::size_t>(j)];
        gx[base + j] += static_cast<float>(rs * (dxh - m1 - (*xhat)[base + j] * m2));
      }
    }
  });
}

Var instance_standardize(const Var& x, float eps) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4) throw ShapeError("instance_standardize: expected NCHW, got " + to_string(xv.shape()));
  const int planes = xv.dim(0) * xv.dim(1);
  const int m = xv.dim(2) * xv.dim(3);
  Tensor out(xv.shape());
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(planes) * 2);  // mean, sigma
  for (int p = 0; p < planes; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * m;
    double mu = 0.0;
    for (int i = 0; i < m; ++i) mu += xv[base + i];
    mu /= m;
    double var = 0.0;
    for (int i = 0; i < m; ++i) {
      const double t = xv[base + i] - mu;
      var += t * t;
    }
    const double sigma = std::sqrt(var / m);
    (*stats)[2 * static_cast<std::size_t>(p)] = mu;
    (*stats)[2 * static_cast<std::size_t>(p) + 1] = sigma;
    const double denom = sigma + eps;
    for (int i = 0; i < m; ++i) out[base + i] = static_cast<float>((xv[base + i] - mu) / denom);
  }
  return make_node(std::move(out), {x}, [stats, planes, m, eps](Node& self) {
    const auto& x = self.parents[0];
    auto& gx = x->grad_buffer();
    const Tensor& gy = self.grad;
    for (int p = 0; p < planes; ++p) {
      const std::size_t base = static_cast<std::size_t>(p) * m;
      const double mu = (*stats)[2 * static_cast<std::size_t>(p)];
      const double sigma = (*stats)[2 * static_cast<std::size_t>(p) + 1];
      const double s = sigma + eps;
      double gmean = 0.0, gdot = 0.0;
      for (int i = 0; i < m; ++i) {
        gmean += gy[base + i];
        gdot += gy[base + i] * (x->value[base + i] - mu);
      }
      gmean /= m;
      const double coef = sigma > 0.0 ? gdot / (m * sigma * s * s) : 0.0;
      for (int i = 0; i < m; ++i) {
        gx[base + i] += static_cast<float>((gy[base + i] - gmean) / s - (x->value[base + i] - mu) * coef);
      }
    }
  });
}

Var mul_channel(const Var& x, const Var& s) {
  const Tensor& xv = x->value;
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  require_shape(s->value, {n, c}, "mul_channel scale");
  Tensor out(xv.shape());
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < hw; ++i) out[static_cast<std::size_t>(p) * hw + i] = xv[static_cast<std::size_t>(p) * hw + i] * s->value[static_cast<std::size_t>(p)];
  return make_node(std::move(out), {x, s}, [n, c, hw](Node& self) {
    const auto& x = self.parents[0];
    const auto& s = self.parents[1];
    for (int p = 0; p < n * c; ++p) {
      const std::size_t base = static_cast<std::size_t>(p) * hw;
      if (x->requires_grad) {
        auto& gx = x->grad_buffer();
        const float sv = s->value[static_cast<std::size_t>(p)];
        for (int i = 0; i < hw; ++i) gx[base + i] += self.grad[base + i] * sv;
      }
      if (s->requires_grad) {
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += self.grad[base + i] * x->value[base + i];
        s->grad_buffer()[static_cast<std::size_t>(p)] += static_cast<float>(acc);
      }
    }
  });
}

Var add_channel(const Var& x, const Var& b) {
  const Tensor& xv = x->value;
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  require_shape(b->value, {n, c}, "add_channel bias");
  Tensor out(xv.shape());
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < hw; ++i) out[static_cast<std::size_t>(p) * hw + i] = xv[static_cast<std::size_t>(p) * hw + i] + b->value[static_cast<std::size_t>(p)];
  return make_node(std::move(out), {x, b}, [n, c, hw](Node& self) {
    const auto& x = self.parents[0];
    const auto& b = self.parents[1];
    if (x->requires_grad) x->grad_buffer().add_(self.grad);
    if (b->requires_grad) {
      auto& gb = b->grad_buffer();
      for (int p = 0; p < n * c; ++p) {
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += self.grad[static_cast<std::size_t>(p) * hw + i];
        gb[static_cast<std::size_t>(p)] += static_cast<float>(acc);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling and layout

Var upsample2x(const Var& x) {
  const Tensor& xv = x->value;
  const int planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor out({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (int p = 0; p < planes; ++p) {
    const float* src = xv.data() + static_cast<std::size_t>(p) * h * w;
    float* dst = out.data() + static_cast<std::size_t>(p) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
  }
  return make_node(std::move(out), {x}, [planes, h, w](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (int p = 0; p < planes; ++p) {
      const float* src = self.grad.data() + static_cast<std::size_t>(p) * 4 * h * w;
      float* dst = gx.data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
    }
  });
}

Var avg_pool2x(const Var& x) {
  const Tensor& xv = x->value;
  const int planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2x needs even spatial size, got " + to_string(xv.shape()));
  const int ho = h / 2, wo = w / 2;
  Tensor out({xv.dim(0), xv.dim(1), ho, wo});
  for (int p = 0; p < planes; ++p) {
    const float* src = xv.data() + static_cast<std::size_t>(p) * h * w;
    float* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        dst[y * wo + xx] = 0.25f * (src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1] + src[(2 * y + 1) * w + 2 * xx] +
                                    src[(2 * y + 1) * w + 2 * xx + 1]);
  }
  return make_node(std::move(out), {x}, [planes, h, w, ho, wo](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (int p = 0; p < planes; ++p) {
      const float* src = self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
      float* dst = gx.data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) dst[y * w + xx] += 0.25f * src[(y / 2) * wo + xx / 2];
    }
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x->value;
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, c});
  for (int p = 0; p < n * c; ++p) {
    double acc = 0.0;
    for (int i = 0; i < hw; ++i) acc += xv[static_cast<std::size_t>(p) * hw + i];
    out[static_cast<std::size_t>(p)] = static_cast<float>(acc / hw);
  }
  return make_node(std::move(out), {x}, [n, c, hw](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (int p = 0; p < n * c; ++p) {
      const float g = self.grad[static_cast<std::size_t>(p)] / static_cast<float>(hw);
      for (int i = 0; i < hw; ++i) gx[static_cast<std::size_t>(p) * hw + i] += g;
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x->value.reshaped(std::move(shape));
  return make_node(std::move(out), {x}, [](Node& self) { self.parents[0]->grad_buffer().add_(self.grad); });
}

Var nchw_to_tokens(const Var& x) {
  const Tensor& xv = x->value;
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, hw, c});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int t = 0; t < hw; ++t)
        out[(static_cast<std::size_t>(b) * hw + t) * c + ch] = xv[(static_cast<std::size_t>(b) * c + ch) * hw + t];
  return make_node(std::move(out), {x}, [n, c, hw](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int t = 0; t < hw; ++t)
          gx[(static_cast<std::size_t>(b) * c + ch) * hw + t] += self.grad[(static_cast<std::size_t>(b) * hw + t) * c + ch];
  });
}

Var tokens_to_nchw(const Var& x, int height, int width) {
  const Tensor& xv = x->value;
  const int n = xv.dim(0), hw = xv.dim(1), c = xv.dim(2);
  if (hw != height * width) throw ShapeError("tokens_to_nchw: token count does not match grid");
  Tensor out({n, c, height, width});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int t = 0; t < hw; ++t)
        out[(static_cast<std::size_t>(b) * c + ch) * hw + t] = xv[(static_cast<std::size_t>(b) * hw + t) * c + ch];
  return make_node(std::move(out), {x}, [n, c, hw](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int t = 0; t < hw; ++t)
          gx[(static_cast<std::size_t>(b) * hw + t) * c + ch] += self.grad[(static_cast<std::size_t>(b) * c + ch) * hw + t];
  });
}

Var slice0(const Var& x, int begin, int end) {
  Tensor out = x->value.slice0(begin, end);
  const std::size_t row = x->value.dim(0) ? x->value.numel() / static_cast<std::size_t>(x->value.dim(0)) : 0;
  return make_node(std::move(out), {x}, [row, begin](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    float* dst = gx.data() + row * static_cast<std::size_t>(begin);
    for (std::size_t i = 0; i < self.grad.numel(); ++i) dst[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Attention and classification

Var softmax_last(const Var& x) {
  const Tensor& xv = x->value;
  const int k = xv.dim(-1);
  const int rows = static_cast<int>(xv.numel() / static_cast<std::size_t>(k));
  Tensor out(xv.shape());
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * k;
    float mx = xv[base];
    for (int j = 1; j < k; ++j) mx = std::max(mx, xv[base + j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(xv[base + j]) - mx);
    for (int j = 0; j < k; ++j) out[base + j] = static_cast<float>(std::exp(static_cast<double>(xv[base + j]) - mx) / z);
  }
  return make_node(std::move(out), {x}, [rows, k](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (int r = 0; r < rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * k;
      double dot = 0.0;
      for (int j = 0; j < k; ++j) dot += self.grad[base + j] * self.value[base + j];
      for (int j = 0; j < k; ++j) gx[base + j] += static_cast<float>(self.value[base + j] * (self.grad[base + j] - dot));
    }
  });
}

Var multi_head_attention(const Var& qkv, int heads) {
  const Tensor& v = qkv->value;
  if (v.rank() != 3 || v.dim(2) % (3 * heads) != 0) {
    throw ShapeError("multi_head_attention: qkv " + to_string(v.shape()) + " heads " + std::to_string(heads));
  }
  const int n = v.dim(0), t = v.dim(1), d = v.dim(2) / 3, dh = d / heads;
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
  using Mat = Eigen::MatrixXf;
  auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(n) * heads);
  Tensor out({n, t, d});
  auto block = [t, d, dh](const Tensor& src, int b, int part, int h) {
    Mat m(t, dh);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < dh; ++j) m(i, j) = src[(static_cast<std::size_t>(b) * t + i) * 3 * d + part * d + h * dh + j];
    return m;
  };
  for (int b = 0; b < n; ++b)
    for (int h = 0; h < heads; ++h) {
      Mat q = block(v, b, 0, h), k = block(v, b, 1, h), val = block(v, b, 2, h);
      Mat s = (q * k.transpose()) * sc;
      for (int i = 0; i < t; ++i) {
        const float mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      Mat o = s * val;
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < dh; ++j) out[(static_cast<std::size_t>(b) * t + i) * d + h * dh + j] = o(i, j);
      (*probs)[static_cast<std::size_t>(b) * heads + h] = std::move(s);
    }
  return make_node(std::move(out), {qkv}, [probs, n, t, d, dh, heads, sc, block](Node& self) {
    const auto& qkv = self.parents[0];
    auto& g = qkv->grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int h = 0; h < heads; ++h) {
        const Mat& p = (*probs)[static_cast<std::size_t>(b) * heads + h];
        Mat q = block(qkv->value, b, 0, h), k = block(qkv->value, b, 1, h), val = block(qkv->value, b, 2, h);
        Mat go(t, dh);
        for (int i = 0; i < t; ++i)
          for (int j = 0; j < dh; ++j) go(i, j) = self.grad[(static_cast<std::size_t>(b) * t + i) * d + h * dh + j];
        Mat gv = p.transpose() * go;
        Mat gp = go * val.transpose();
        Mat gs(t, t);
        for (int i = 0; i < t; ++i) {
          const float dot = gp.row(i).dot(p.row(i));
          gs.row(i) = (p.row(i).array() * (gp.row(i).array() - dot)).matrix();
        }
        Mat gq = (gs * k) * sc;
        Mat gk = (gs.transpose() * q) * sc;
        for (int i = 0; i < t; ++i)
          for (int j = 0; j < dh; ++j) {
            const std::size_t base = (static_cast<std::size_t>(b) * t + i) * 3 * d + h * dh + j;
            g[base] += gq(i, j);
            g[base + d] += gk(i, j);
            g[base + 2 * static_cast<std::size_t>(d)] += gv(i, j);
          }
      }
  });
}

Var l2_normalize_rows(const Var& x, float eps) {
  const Tensor& xv = x->value;
  const int e = xv.dim(-1);
  const int rows = static_cast<int>(xv.numel() / static_cast<std::size_t>(e));
  Tensor out(xv.shape());
  auto norms = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int j = 0; j < e; ++j) acc += static_cast<double>(xv[static_cast<std::size_t>(r) * e + j]) * xv[static_cast<std::size_t>(r) * e + j];
    const float nr = std::max(static_cast<float>(std::sqrt(acc)), eps);
    (*norms)[static_cast<std::size_t>(r)] = nr;
    for (int j = 0; j < e; ++j) out[static_cast<std::size_t>(r) * e + j] = xv[static_cast<std::size_t>(r) * e + j] / nr;
  }
  return make_node(std::move(out), {x}, [norms, rows, e](Node& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (int r = 0; r < rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * e;
      double dot = 0.0;
      for (int j = 0; j < e; ++j) dot += self.grad[base + j] * self.value[base + j];
      const float nr = (*norms)[static_cast<std::size_t>(r)];
      for (int j = 0; j < e; ++j) gx[base + j] += static_cast<float>((self.grad[base + j] - self.value[base + j] * dot) / nr);
    }
  });
}

Var row_dot(const Var& a, const Var& b) {
  check_same(a, b, "row_dot");
  const int e = a->value.dim(-1);
  const int rows = static_cast<int>(a->value.numel() / static_cast<std::size_t>(e));
  Tensor out({rows});
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int j = 0; j < e; ++j) acc += static_cast<double>(a->value[static_cast<std::size_t>(r) * e + j]) * b->value[static_cast<std::size_t>(r) * e + j];
    out[static_cast<std::size_t>(r)] = static_cast<float>(acc);
  }
  return make_node(std::move(out), {a, b}, [rows, e](Node& self) {
    for (int side = 0; side < 2; ++side) {
      const auto& p = self.parents[static_cast<std::size_t>(side)];
      const auto& q = self.parents[static_cast<std::size_t>(1 - side)];
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < e; ++j) g[static_cast<std::size_t>(r) * e + j] += self.grad[static_cast<std::size_t>(r)] * q->value[static_cast<std::size_t>(r) * e + j];
    }
  });
}

Var cosine_rows(const Var& a, const Var& b) {
  check_same(a, b, "cosine_rows");
  const int e = a->value.dim(-1);
  const int rows = static_cast<int>(a->value.numel() / static_cast<std::size_t>(e));
  Tensor out({rows});
  // Per row: dot, |a|^2, |b|^2 in double, so cos(a, a) rounds to exactly 1.
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * 3);
  for (int r = 0; r < rows; ++r) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (int j = 0; j < e; ++j) {
      const double x = a->value[static_cast<std::size_t>(r) * e + j];
      const double y = b->value[static_cast<std::size_t>(r) * e + j];
      dot += x * y;
      aa += x * x;
      bb += y * y;
    }
    if (aa == 0.0 || bb == 0.0) throw std::domain_error("cosine_rows: zero-norm row");
    (*stats)[static_cast<std::size_t>(r) * 3] = dot;
    (*stats)[static_cast<std::size_t>(r) * 3 + 1] = aa;
    (*stats)[static_cast<std::size_t>(r) * 3 + 2] = bb;
    out[static_cast<std::size_t>(r)] = static_cast<float>(dot / (std::sqrt(aa) * std::sqrt(bb)));
  }
  return make_node(std::move(out), {a, b}, [rows, e, stats](Node& self) {
    for (int side = 0; side < 2; ++side) {
      const auto& p = self.parents[static_cast<std::size_t>(side)];
      const auto& q = self.parents[static_cast<std::size_t>(1 - side)];
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (int r = 0; r < rows; ++r) {
        const double dot = (*stats)[static_cast<std::size_t>(r) * 3];
        const double pp = (*stats)[static_cast<std::size_t>(r) * 3 + 1 + side];
        const double qq = (*stats)[static_cast<std::size_t>(r) * 3 + 2 - side];
        const double inv = 1.0 / std::sqrt(pp * qq);
        const double cos = dot * inv;
        const double gr = self.grad[static_cast<std::size_t>(r)];
        for (int j = 0; j < e; ++j) {
          const std::size_t k = static_cast<std::size_t>(r) * e + j;
          g[k] += static_cast<float>(gr * (q->value[k] * inv - cos * p->value[k] / pp));
        }
      }
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Tensor& lv = logits->value;
  if (lv.rank() != 2 || static_cast<std::size_t>(lv.dim(0)) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + to_string(lv.shape()) + " labels " + std::to_string(labels.size()));
  }
  const int n = lv.dim(0), k = lv.dim(1);
  auto prob = std::make_shared<Tensor>(lv.shape());
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= k) throw ShapeError("cross_entropy: label out of range");
    const std::size_t base = static_cast<std::size_t>(r) * k;
    float mx = lv[base];
    for (int j = 1; j < k; ++j) mx = std::max(mx, lv[base + j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(lv[base + j]) - mx);
    for (int j = 0; j < k; ++j) (*prob)[base + j] = static_cast<float>(std::exp(static_cast<double>(lv[base + j]) - mx) / z);
    loss += std::log(z) + mx - lv[base + y];
  }
  return make_node(Tensor({1}, static_cast<float>(loss / n)), {logits}, [prob, lab, n, k](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const float s = self.grad[0] / static_cast<float>(n);
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < k; ++j) {
        const std::size_t i = static_cast<std::size_t>(r) * k + j;
        g[i] += s * ((*prob)[i] - (j == (*lab)[static_cast<std::size_t>(r)] ? 1.0f : 0.0f));
      }
  });
}

// ---------------------------------------------------------------------------
// Quantization plumbing

Var straight_through(const Var& z, const Var& zq) {
  check_same(z, zq, "straight_through");
  Tensor out = zq->value;
  return make_node(std::move(out), {z}, [](Node& self) { self.parents[0]->grad_buffer().add_(self.grad); });
}

Var gather_codes(const Var& codebook, std::span<const int> indices, int batch, int height, int width) {
  const Tensor& cb = codebook->value;
  const int ncodes = cb.dim(0), d = cb.dim(1);
  const int hw = height * width;
  if (indices.size() != static_cast<std::size_t>(batch) * hw) throw ShapeError("gather_codes: index count mismatch");
  Tensor out({batch, d, height, width});
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < hw; ++t) {
      const int idx = indices[static_cast<std::size_t>(b) * hw + t];
      if (idx < 0 || idx >= ncodes) throw ShapeError("gather_codes: index out of range");
      for (int ch = 0; ch < d; ++ch)
        out[(static_cast<std::size_t>(b) * d + ch) * hw + t] = cb[static_cast<std::size_t>(idx) * d + ch];
    }
  auto idx = std::make_shared<std::vector<int>>(indices.begin(), indices.end());
  return make_node(std::move(out), {codebook}, [idx, batch, d, hw](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < hw; ++t) {
        const int code = (*idx)[static_cast<std::size_t>(b) * hw + t];
        for (int ch = 0; ch < d; ++ch)
          g[static_cast<std::size_t>(code) * d + ch] += self.grad[(static_cast<std::size_t>(b) * d + ch) * hw + t];
      }
  });
}

}  // namespace idref::nn
