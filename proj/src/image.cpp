// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace idref {

std::string to_string(Domain d) {
  switch (d) {
    case Domain::rgb: return "rgb";
    case Domain::diffuse: return "diffuse";
    case Domain::specular: return "specular";
    case Domain::roughness: return "roughness";
    case Domain::normal: return "normal";
  }
  throw UnknownDomainError("unknown domain value " + std::to_string(static_cast<int>(d)));
}

std::string to_string(View v) {
  switch (v) {
    case View::left: return "left";
    case View::frontal: return "frontal";
    case View::right: return "right";
  }
  throw UnknownViewError("unknown view value " + std::to_string(static_cast<int>(v)));
}

Domain parse_domain(const std::string& s) {
  for (Domain d : kAllDomains)
    if (to_string(d) == s) return d;
  throw UnknownDomainError("unknown domain '" + s + "'");
}

View parse_view(const std::string& s) {
  for (View v : kAllViews)
    if (to_string(v) == s) return v;
  throw UnknownViewError("unknown view '" + s + "'");
}

void validate(Domain d) { (void)to_string(d); }
void validate(View v) { (void)to_string(v); }

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

void write_png_raw(const std::filesystem::path& path, int width, int height, int channels,
                   const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw ImageIoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("png write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or text chunks: identical inputs give identical files.
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, bytes.data() + static_cast<std::size_t>(y) * width * channels);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> bytes(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), to_byte);
  write_png_raw(path, image.width, image.height, 3, bytes);
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> bytes(mask.values.size());
  std::transform(mask.values.begin(), mask.values.end(), bytes.begin(), [](auto v) { return v ? 255 : 0; });
  write_png_raw(path, mask.width, mask.height, 1, bytes);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ImageIoError("cannot open: " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageIoError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng init failed");
  }
  std::vector<std::uint8_t> bytes;
  int width = 0, height = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("unsupported PNG layout: " + path.string());
  }
  bytes.resize(rowbytes * static_cast<std::size_t>(height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(height, width);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

Image resize(const Image& image, int height, int width) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("resize: non-positive target size");
  if (image.height == height && image.width == width) return image;
  Image out(height, width);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  if (sy >= 1.0 && sx >= 1.0) {
    // Box filter over the source footprint with fractional edge coverage.
    for (int y = 0; y < height; ++y) {
      const double y0 = y * sy, y1 = (y + 1) * sy;
      for (int x = 0; x < width; ++x) {
        const double x0 = x * sx, x1 = (x + 1) * sx;
        double acc[3] = {0, 0, 0}, area = 0.0;
        for (int iy = static_cast<int>(std::floor(y0)); iy < static_cast<int>(std::ceil(y1)); ++iy) {
          const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
          if (wy <= 0 || iy >= image.height) continue;
          for (int ix = static_cast<int>(std::floor(x0)); ix < static_cast<int>(std::ceil(x1)); ++ix) {
            const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
            if (wx <= 0 || ix >= image.width) continue;
            for (int c = 0; c < 3; ++c) acc[c] += wx * wy * image.at(iy, ix, c);
            area += wx * wy;
          }
        }
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = static_cast<float>(acc[c] / area);
      }
    }
    return out;
  }
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - tx) * image.at(y0, x0, c) + tx * image.at(y0, x1, c);
        const double bot = (1 - tx) * image.at(y1, x0, c) + tx * image.at(y1, x1, c);
        out.at(y, x, c) = static_cast<float>((1 - ty) * top + ty * bot);
      }
    }
  }
  return out;
}

Image quantize8(const Image& image) {
  Image out = image;
  for (auto& v : out.pixels) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

nn::Tensor to_tensor(std::span<const Image> images) {
  if (images.empty()) throw nn::ShapeError("to_tensor: empty image list");
  const int h = images[0].height, w = images[0].width;
  nn::Tensor t({static_cast<int>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = images[n];
    if (img.height != h || img.width != w) throw nn::ShapeError("to_tensor: images differ in size");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t.at(static_cast<int>(n), c, y, x) = img.at(y, x, c);
  }
  return t;
}

nn::Tensor to_tensor(const Image& image) { return to_tensor(std::span<const Image>(&image, 1)); }

Image from_tensor(const nn::Tensor& t, int index) {
  if (t.rank() != 4 || t.dim(1) != 3) throw nn::ShapeError("from_tensor: expected [N,3,H,W], got " + nn::to_string(t.shape()));
  Image img(t.dim(2), t.dim(3));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) img.at(y, x, c) = t.at(index, c, y, x);
  return img;
}

}  // namespace idref
