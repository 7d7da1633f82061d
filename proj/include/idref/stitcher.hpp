// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "idref/datagen.hpp"
#include "idref/dataset.hpp"
#include "idref/image.hpp"
#include "idref/swapper.hpp"

namespace idref {

class StitchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StitchConfig {
  int uv_size = 64;
  /// Frontal priority in the overlap.
  float gamma = 2.0f;
  /// Width in UV cells of the feathered transition at support boundaries.
  int band = 8;
  /// Overlap cells required before side views are colour matched.
  int min_overlap = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static StitchConfig from_json(const nlohmann::json& j);
};

/// One stored identity: four reflectance domains in three views, the views'
/// correspondences, and the embedding of its frontal rgb face.
struct TemplateEntry {
  int identity_id = 0;
  std::vector<float> embedding;
  std::map<Domain, std::array<DomainImage, 3>> images;  // indexed by View
  std::array<CorrespondenceField, 3> correspondence;
  DomainImage frontal_rgb;
};

struct TemplateLibrary {
  std::vector<TemplateEntry> entries;
  std::filesystem::path manifest;
  std::string split;

  /// Captured identities of `split`, embedded with `embedder`.
  static TemplateLibrary build(const Dataset& data, const std::string& split, const Embedder& embedder);
  /// Writes library.json (manifest path, split, embeddings).
  void save(const std::filesystem::path& dir) const;
  /// Reloads images and correspondences from the referenced dataset.
  static TemplateLibrary load(const std::filesystem::path& dir);
  const TemplateEntry* find(int identity_id) const;
};

/// Entry with the largest cosine similarity to `e`; ties go to the lowest
/// identity id.
const TemplateEntry& select_template(std::span<const float> e, const TemplateLibrary& library);

/// BT.601 full-range conversion without chroma offsets.
std::array<double, 3> rgb_to_yuv(double r, double g, double b);
std::array<double, 3> yuv_to_rgb(double y, double u, double v);

/// Remaps each YUV channel of `src` affinely so its statistics over `overlap`
/// match `ref`'s, then clamps to [0,1]. Only diffuse and rgb images change;
/// other domains are returned unchanged.
DomainImage yuv_color_match(const DomainImage& src, const DomainImage& ref, const Mask& overlap);

/// A view resampled into UV space by rasterising its correspondence mesh;
/// uncovered cells are zero.
struct UvPartial {
  Image color;
  std::vector<float> weight;  // uv*uv coverage count
  int size() const { return color.height; }
  Mask support() const;
};

UvPartial unwrap_view(const Image& img, const CorrespondenceField& corr, int uv_size);

/// Bilinear lookup of a partial at UV (u,v), using only cells with mass.
/// Returns false when no neighbouring cell has mass.
bool sample_uv(const UvPartial& p, double u, double v, std::array<float, 3>& out);

/// Per-cell feather in (0,1]: distance to the nearest unsupported grid cell over
/// `band`, clamped. Zero outside the support.
std::vector<float> feather(const Mask& support, int band);

struct BlendResult {
  Image color;
  Mask mask;
};

/// Merges left/frontal/right partials (indexed by View). Each view carries a
/// ramp: distance to the nearest cell covered only by its competitor, over
/// `band`, clamped to 1. Left and right are averaged by their ramps into a
/// side map S. Where frontal and side overlap the frontal fraction is
/// r_F * (1 + gamma - r_S) / (1 + gamma), which equals gamma / (1 + gamma)
/// deep inside both. Cells without any view take `fallback` when given.
BlendResult blend_views(std::span<const UvPartial> partials, const StitchConfig& cfg,
                        const UvPartial* fallback = nullptr);

struct UvAsset {
  std::map<Domain, Image> maps;
  Mask mask;
  int template_id = 0;
  std::optional<int> input_id;

  void save(const std::filesystem::path& dir) const;
};

/// embed -> select_template -> 12 swaps -> colour match (diffuse) -> unwrap
/// with the template's correspondences -> blend.
UvAsset reflectance_infer(const DomainImage& face, const TemplateLibrary& library, const SwapModels& models,
                          const StitchConfig& cfg);

}  // namespace idref
