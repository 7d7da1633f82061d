// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "idref/tensor.hpp"

namespace idref {

enum class Domain { rgb = 0, diffuse = 1, specular = 2, roughness = 3, normal = 4 };
enum class View { left = 0, frontal = 1, right = 2 };

inline constexpr std::array<Domain, 5> kAllDomains{Domain::rgb, Domain::diffuse, Domain::specular, Domain::roughness,
                                                   Domain::normal};
inline constexpr std::array<Domain, 4> kReflectanceDomains{Domain::diffuse, Domain::specular, Domain::roughness,
                                                           Domain::normal};
inline constexpr std::array<View, 3> kAllViews{View::left, View::frontal, View::right};

class UnknownDomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class UnknownViewError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string to_string(Domain d);
std::string to_string(View v);
Domain parse_domain(const std::string& s);
View parse_view(const std::string& s);
void validate(Domain d);
void validate(View v);

/// Three-channel float image, row-major HWC.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool empty() const { return pixels.empty(); }
};

struct DomainImage {
  Image pixels;
  Domain domain = Domain::rgb;
  View view = View::frontal;
  std::optional<int> identity_id;
};

/// Single-channel 8-bit-ish mask helper (values 0/1).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
};

// PNG I/O (8-bit). Grayscale inputs are replicated to three channels and
// alpha is dropped.
void write_png(const std::filesystem::path& path, const Image& image);
void write_mask_png(const std::filesystem::path& path, const Mask& mask);
Image read_png(const std::filesystem::path& path);

/// Area-averaging resize when shrinking, bilinear when enlarging.
Image resize(const Image& image, int height, int width);

/// Quantize to 8 bits and back, as a PNG round trip would.
Image quantize8(const Image& image);

nn::Tensor to_tensor(std::span<const Image> images);
nn::Tensor to_tensor(const Image& image);
Image from_tensor(const nn::Tensor& t, int index = 0);

}  // namespace idref
