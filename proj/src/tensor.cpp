// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace idref::nn {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " + to_string(shape_));
  }
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range for shape " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other, float scale) {
  if (other.numel() != numel()) {
    throw ShapeError("add_: " + to_string(shape_) + " vs " + to_string(other.shape_));
  }
  const float* src = other.data();
  float* dst = data();
  const std::size_t n = numel();
  if (scale == 1.0f) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) dst[i] += scale * src[i];
  }
}

Tensor Tensor::slice0(int begin, int end) const {
  if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end) {
    throw ShapeError("slice0 out of range for " + to_string(shape_));
  }
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t row = shape_[0] ? numel() / static_cast<std::size_t>(shape_[0]) : 0;
  Tensor out(s);
  std::memcpy(out.data(), data() + row * begin, sizeof(float) * row * static_cast<std::size_t>(end - begin));
  return out;
}

Tensor Tensor::stack0(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack0 of empty list");
  Shape s = parts.front().shape();
  int rows = 0;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    Shape ref(s.begin() + 1, s.end());
    if (tail != ref) throw ShapeError("stack0 shape mismatch " + to_string(p.shape()) + " vs " + to_string(s));
    rows += p.shape()[0];
  }
  s[0] = rows;
  Tensor out(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off, p.data(), sizeof(float) * p.numel());
    off += p.numel();
  }
  return out;
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected shape " + to_string(expected) + ", got " + to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

}  // namespace idref::nn
