// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "idref/image.hpp"

namespace idref {

/// Indices into IdentityParams::geometry.
enum GeometryParam : int {
  kEyeY,
  kEyeSeparation,
  kEyeSize,
  kBrowGap,
  kNoseLength,
  kNoseWidth,
  kMouthY,
  kMouthWidth,
  kLipThickness,
  kCheekRedness,
  kTZoneShine,
  kRoughnessBase,
  kGeometryDims
};

struct IdentityParams {
  int id = 0;
  std::array<float, kGeometryDims> geometry{};
  std::array<float, 3> skin_tone{};
  std::uint64_t detail_seed = 0;

  bool operator==(const IdentityParams&) const = default;
};

IdentityParams generate_identity(std::uint64_t seed);

nlohmann::json to_json(const IdentityParams& p);
IdentityParams identity_from_json(const nlohmann::json& j);

/// Per-pixel UV coordinates; invalid pixels hold kUvSentinel.
struct CorrespondenceField {
  static constexpr float kUvSentinel = -1.0f;

  int height = 0;
  int width = 0;
  std::vector<float> uv;             // H*W*2
  std::vector<std::uint8_t> valid;   // H*W

  CorrespondenceField() = default;
  CorrespondenceField(int h, int w)
      : height(h), width(w), uv(static_cast<std::size_t>(h) * w * 2, kUvSentinel),
        valid(static_cast<std::size_t>(h) * w, 0) {}

  bool is_valid(int y, int x) const { return valid[static_cast<std::size_t>(y) * width + x] != 0; }
  float u(int y, int x) const { return uv[(static_cast<std::size_t>(y) * width + x) * 2]; }
  float v(int y, int x) const { return uv[(static_cast<std::size_t>(y) * width + x) * 2 + 1]; }
  Mask mask() const;
};

void save_correspondence(const std::filesystem::path& dir, const CorrespondenceField& field);
CorrespondenceField load_correspondence(const std::filesystem::path& dir);

/// Head model shared by rendering, unwrapping tests and the stitcher: an
/// ellipsoid seen orthographically, yawed per view.
struct HeadModel {
  static constexpr double kThetaRange = 80.0;  // degrees, UV u spans [-80, 80]
  static constexpr double kPhiRange = 65.0;    // degrees, UV v spans [-65, 65]

  static double yaw_degrees(View v);
  /// Pixel-space projection of a UV point; nullopt when it faces away.
  static std::optional<std::array<double, 2>> project(double u, double v, View view, int size);
  /// UV coordinates seen by pixel (x, y); nullopt outside the silhouette.
  static std::optional<std::array<double, 2>> unproject(int x, int y, View view, int size);
};

struct RenderOptions {
  /// Selects lighting jitter for rgb renders. Zero means canonical lighting.
  std::uint64_t nuisance_seed = 0;
};

std::vector<std::pair<DomainImage, CorrespondenceField>> render_views(const IdentityParams& params, Domain domain,
                                                                      std::span<const View> views, int size,
                                                                      const RenderOptions& options = {});

/// Ground-truth texture of one reflectance domain laid out in UV space.
Image render_uv(const IdentityParams& params, Domain domain, int uv_size);

struct DatagenConfig {
  int identities = 48;
  int image_size = 64;
  double split = 0.8;
  double reflectance_ratio = 0.1;
  std::uint64_t seed = 0;
};

struct ManifestEntry {
  std::optional<int> identity_id;
  Domain domain = Domain::rgb;
  View view = View::frontal;
  std::string file;
  std::string correspondence;
};

struct ManifestIdentity {
  IdentityParams params;
  std::string split;  // "train" | "test"
  bool captured = false;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  int image_size = 0;
  std::vector<ManifestIdentity> identities;
  std::vector<ManifestEntry> entries;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j, const std::filesystem::path& root);
  static DatasetManifest load(const std::filesystem::path& manifest_path);
  void save(const std::filesystem::path& manifest_path) const;

  /// Throws std::runtime_error naming the first violated invariant.
  void validate() const;
  const ManifestIdentity* find_identity(int id) const;
  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seed of identity `index` in a dataset generated with `seed`.
std::uint64_t identity_seed(std::uint64_t dataset_seed, int index);

DatasetManifest build_dataset(const DatagenConfig& config, const std::filesystem::path& out_dir);

struct IngestResult {
  DatasetManifest fragment;
  std::vector<DomainImage> images;
  std::vector<std::string> errors;  // one line per skipped file
};

IngestResult ingest_folder(const std::filesystem::path& folder, Domain domain, int target_size);

}  // namespace idref
