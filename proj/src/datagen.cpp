// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "idref/checkpoint.hpp"
#include "idref/random.hpp"

namespace idref {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kHalfWidth = 0.34;   // ellipsoid semi-axis, fraction of image width
constexpr double kHalfHeight = 0.42;  // fraction of image height

struct Vec3 {
  double x, y, z;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 normalized() const {
    const double n = std::sqrt(dot(*this));
    return {x / n, y / n, z / n};
  }
};

double lerp(double a, double b, double t) { return a + (b - a) * t; }

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

/// Soft-edged ellipse indicator in face coordinates.
double blob(double fx, double fy, double cx, double cy, double rx, double ry) {
  const double d = std::hypot((fx - cx) / rx, (fy - cy) / ry);
  return 1.0 - smoothstep(0.8, 1.2, d);
}

double gauss(double fx, double fy, double cx, double cy, double sx, double sy) {
  const double dx = (fx - cx) / sx, dy = (fy - cy) / sy;
  return std::exp(-0.5 * (dx * dx + dy * dy));
}

/// Smoothly interpolated lattice noise in [-1, 1] over the unit square.
class ValueNoise {
 public:
  ValueNoise(std::uint64_t seed, int cells) : cells_(cells), lattice_((cells + 1) * (cells + 1)) {
    Rng rng(seed);
    for (auto& v : lattice_) v = uniform(rng, -1.0, 1.0);
  }

  double operator()(double u, double v) const {
    const double fu = std::clamp(u, 0.0, 1.0) * cells_;
    const double fv = std::clamp(v, 0.0, 1.0) * cells_;
    const int i = std::min(static_cast<int>(fu), cells_ - 1);
    const int j = std::min(static_cast<int>(fv), cells_ - 1);
    const double tu = smoothstep(0.0, 1.0, fu - i), tv = smoothstep(0.0, 1.0, fv - j);
    auto at = [&](int a, int b) { return lattice_[static_cast<std::size_t>(b * (cells_ + 1) + a)]; };
    return lerp(lerp(at(i, j), at(i + 1, j), tu), lerp(at(i, j + 1), at(i + 1, j + 1), tu), tv);
  }

 private:
  int cells_;
  std::vector<double> lattice_;
};

/// Evaluates every texture layer of one identity at a UV point.
class FaceTexture {
 public:
  explicit FaceTexture(const IdentityParams& p)
      : p_(p),
        coarse_(mix_seed(p.detail_seed, 1), 8),
        fine_(mix_seed(p.detail_seed, 2), 20),
        bumps_(mix_seed(p.detail_seed, 3), 24) {
    const auto& g = p.geometry;
    eye_y_ = lerp(-0.38, -0.18, g[kEyeY]);
    eye_sep_ = lerp(0.24, 0.38, g[kEyeSeparation]);
    eye_r_ = lerp(0.07, 0.11, g[kEyeSize]);
    brow_y_ = eye_y_ - lerp(0.09, 0.16, g[kBrowGap]);
    nose_y_ = lerp(0.05, 0.22, g[kNoseLength]);
    nose_w_ = lerp(0.06, 0.11, g[kNoseWidth]);
    mouth_y_ = lerp(0.36, 0.52, g[kMouthY]);
    mouth_w_ = lerp(0.16, 0.30, g[kMouthWidth]);
    lip_t_ = lerp(0.035, 0.07, g[kLipThickness]);
  }

  struct Features {
    double eyes, iris, brows, lips, nostrils, tzone;
  };

  Features features(double fx, double fy) const {
    Features f{};
    for (double side : {-1.0, 1.0}) {
      f.eyes = std::max(f.eyes, blob(fx, fy, side * eye_sep_, eye_y_, eye_r_, eye_r_ * 0.55));
      f.iris = std::max(f.iris, blob(fx, fy, side * eye_sep_, eye_y_, eye_r_ * 0.45, eye_r_ * 0.45));
      f.brows = std::max(f.brows, blob(fx, fy, side * eye_sep_, brow_y_, eye_r_ * 1.5, 0.028));
      f.nostrils = std::max(f.nostrils, blob(fx, fy, side * nose_w_ * 0.6, nose_y_, 0.03, 0.018));
    }
    f.iris *= f.eyes;
    f.lips = blob(fx, fy, 0.0, mouth_y_, mouth_w_ * 0.5, lip_t_);
    f.tzone = std::max(gauss(fx, fy, 0.0, -0.62, 0.35, 0.18), gauss(fx, fy, 0.0, nose_y_ * 0.5, nose_w_ * 1.2, 0.3));
    return f;
  }

  std::array<double, 3> diffuse(double u, double v) const {
    const double fx = 2 * u - 1, fy = 2 * v - 1;
    const Features f = features(fx, fy);
    std::array<double, 3> c{};
    const double grad = 1.0 - 0.06 * fy;
    const double mottle = 1.0 + 0.06 * coarse_(u, v) + 0.03 * fine_(u, v);
    const double cheeks = p_.geometry[kCheekRedness] *
                          std::max(gauss(fx, fy, -0.42, 0.5 * (eye_y_ + mouth_y_), 0.15, 0.15),
                                   gauss(fx, fy, 0.42, 0.5 * (eye_y_ + mouth_y_), 0.15, 0.15));
    static constexpr std::array<double, 3> kBlush{0.10, -0.04, -0.04};
    static constexpr std::array<double, 3> kLip{0.85, 0.55, 0.55};
    static constexpr std::array<double, 3> kBrow{0.18, 0.12, 0.08};
    static constexpr std::array<double, 3> kSclera{0.92, 0.90, 0.88};
    static constexpr std::array<double, 3> kIris{0.25, 0.17, 0.10};
    for (int k = 0; k < 3; ++k) {
      const double skin = p_.skin_tone[static_cast<std::size_t>(k)];
      double x = skin * grad * mottle + cheeks * kBlush[k];
      x = lerp(x, skin * kLip[k], 0.8 * f.lips);
      x = lerp(x, skin * 0.3, 0.7 * f.nostrils);
      x = lerp(x, kBrow[k], 0.85 * f.brows);
      x = lerp(x, kSclera[k], f.eyes);
      x = lerp(x, kIris[k], f.iris);
      c[static_cast<std::size_t>(k)] = std::clamp(x, 0.0, 1.0);
    }
    return c;
  }

  double specular(double u, double v) const {
    const double fx = 2 * u - 1, fy = 2 * v - 1;
    const Features f = features(fx, fy);
    const double s = 0.12 + 0.3 * p_.geometry[kTZoneShine] * f.tzone + 0.25 * f.lips + 0.5 * f.eyes +
                     0.04 * fine_(u, v);
    return std::clamp(s, 0.0, 1.0);
  }

  double roughness(double u, double v) const {
    const double fx = 2 * u - 1, fy = 2 * v - 1;
    const Features f = features(fx, fy);
    const double r = 0.45 + 0.3 * (p_.geometry[kRoughnessBase] - 0.5) - 0.15 * p_.geometry[kTZoneShine] * f.tzone +
                     0.25 * f.brows - 0.3 * f.eyes + 0.05 * coarse_(u, v);
    return std::clamp(r, 0.0, 1.0);
  }

  /// Object-space unit normal: ellipsoid-like base plus a feature height field.
  Vec3 normal(double u, double v) const {
    const double theta = (2 * u - 1) * HeadModel::kThetaRange * kDeg;
    const double phi = (2 * v - 1) * HeadModel::kPhiRange * kDeg;
    const Vec3 n0{std::cos(phi) * std::sin(theta), std::sin(phi), std::cos(phi) * std::cos(theta)};
    const Vec3 t{std::cos(theta), 0.0, -std::sin(theta)};
    const Vec3 b{-std::sin(phi) * std::sin(theta), std::cos(phi), -std::sin(phi) * std::cos(theta)};
    constexpr double h = 1e-3;
    const double hx = (height(u + h, v) - height(u - h, v)) / (2 * h);
    const double hy = (height(u, v + h) - height(u, v - h)) / (2 * h);
    return (n0 - t * (0.5 * hx) - b * (0.5 * hy)).normalized();
  }

 private:
  double height(double u, double v) const {
    const double fx = 2 * u - 1, fy = 2 * v - 1;
    double hgt = 0.10 * gauss(fx, fy, 0.0, 0.5 * nose_y_, nose_w_, 0.22);
    for (double side : {-1.0, 1.0}) hgt -= 0.05 * gauss(fx, fy, side * eye_sep_, eye_y_, eye_r_ * 1.3, eye_r_);
    hgt += 0.03 * gauss(fx, fy, 0.0, mouth_y_, mouth_w_ * 0.5, lip_t_);
    hgt += 0.004 * bumps_(u, v);
    return hgt;
  }

  IdentityParams p_;
  ValueNoise coarse_, fine_, bumps_;
  double eye_y_, eye_sep_, eye_r_, brow_y_, nose_y_, nose_w_, mouth_y_, mouth_w_, lip_t_;
};

struct Lighting {
  Vec3 dir{-0.35, -0.45, 1.0};
  double intensity = 1.0;
  double ambient = 0.3;

  static Lighting from_seed(std::uint64_t seed) {
    Lighting l;
    if (seed != 0) {
      Rng rng(mix_seed(seed, 0x11647));
      l.dir.x += uniform(rng, -0.15, 0.15);
      l.dir.y += uniform(rng, -0.1, 0.1);
      l.intensity = uniform(rng, 0.92, 1.08);
      l.ambient = uniform(rng, 0.27, 0.33);
    }
    l.dir = l.dir.normalized();
    return l;
  }
};

std::array<double, 3> shade(const FaceTexture& tex, double u, double v, double yaw, const Lighting& light) {
  const auto albedo = tex.diffuse(u, v);
  const double spec = tex.specular(u, v);
  const double rough = tex.roughness(u, v);
  const Vec3 n = tex.normal(u, v);
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const Vec3 nc{n.x * cy + n.z * sy, n.y, -n.x * sy + n.z * cy};
  const Vec3 half = (light.dir + Vec3{0, 0, 1}).normalized();
  const double lambert = std::max(0.0, nc.dot(light.dir));
  const double shininess = 4.0 + 80.0 * (1.0 - rough) * (1.0 - rough);
  const double highlight = spec * light.intensity * 0.8 * std::pow(std::max(0.0, nc.dot(half)), shininess);
  std::array<double, 3> rgb{};
  for (std::size_t k = 0; k < 3; ++k) {
    rgb[k] = std::clamp(albedo[k] * (light.ambient + 0.85 * light.intensity * lambert) + highlight, 0.0, 1.0);
  }
  return rgb;
}

std::array<double, 3> sample_domain(const FaceTexture& tex, Domain domain, double u, double v, double yaw,
                                    const Lighting& light) {
  switch (domain) {
    case Domain::rgb: return shade(tex, u, v, yaw, light);
    case Domain::diffuse: return tex.diffuse(u, v);
    case Domain::specular: return {0.0, 0.0, tex.specular(u, v)};
    case Domain::roughness: {
      const double r = tex.roughness(u, v);
      return {r, r, r};
    }
    case Domain::normal: {
      const Vec3 n = tex.normal(u, v);
      return {0.5 * n.x + 0.5, 0.5 * n.y + 0.5, 0.5 * n.z + 0.5};
    }
  }
  throw UnknownDomainError("unknown domain value " + std::to_string(static_cast<int>(domain)));
}

std::string id_tag(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id%05d", id);
  return buf;
}

}  // namespace

IdentityParams generate_identity(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x1de));
  IdentityParams p;
  p.id = static_cast<int>(seed & 0x7fffffffULL);
  for (auto& g : p.geometry) g = static_cast<float>(unit_uniform(rng));
  const double tone = unit_uniform(rng);
  static constexpr std::array<double, 3> kLight{0.92, 0.74, 0.62};
  static constexpr std::array<double, 3> kDark{0.40, 0.25, 0.17};
  for (std::size_t k = 0; k < 3; ++k) {
    const double jitter = uniform(rng, -0.04, 0.04);
    p.skin_tone[k] = static_cast<float>(std::clamp(lerp(kLight[k], kDark[k], tone) + jitter, 0.0, 1.0));
  }
  p.detail_seed = rng();
  return p;
}

json to_json(const IdentityParams& p) {
  return {{"id", p.id}, {"geometry", p.geometry}, {"skin_tone", p.skin_tone}, {"detail_seed", p.detail_seed}};
}

IdentityParams identity_from_json(const json& j) {
  IdentityParams p;
  p.id = j.at("id").get<int>();
  p.geometry = j.at("geometry").get<std::array<float, kGeometryDims>>();
  p.skin_tone = j.at("skin_tone").get<std::array<float, 3>>();
  p.detail_seed = j.at("detail_seed").get<std::uint64_t>();
  return p;
}

Mask CorrespondenceField::mask() const {
  Mask m(height, width);
  m.values = valid;
  return m;
}

void save_correspondence(const fs::path& dir, const CorrespondenceField& field) {
  Checkpoint ckpt;
  ckpt.arrays.emplace("uv", nn::Tensor({field.height, field.width, 2}, field.uv));
  nn::Tensor valid({field.height, field.width});
  for (std::size_t i = 0; i < field.valid.size(); ++i) valid[i] = field.valid[i] ? 1.0f : 0.0f;
  ckpt.arrays.emplace("valid", std::move(valid));
  ckpt.config = {{"kind", "correspondence"}};
  save_checkpoint(dir, ckpt);
}

CorrespondenceField load_correspondence(const fs::path& dir) {
  const Checkpoint ckpt = load_checkpoint(dir);
  const auto& uv = ckpt.arrays.at("uv");
  const auto& valid = ckpt.arrays.at("valid");
  CorrespondenceField field(uv.dim(0), uv.dim(1));
  field.uv = uv.storage();
  for (std::size_t i = 0; i < field.valid.size(); ++i) field.valid[i] = valid[i] != 0.0f ? 1 : 0;
  return field;
}

double HeadModel::yaw_degrees(View v) {
  switch (v) {
    case View::left: return 30.0;
    case View::frontal: return 0.0;
    case View::right: return -30.0;
  }
  throw UnknownViewError("unknown view value " + std::to_string(static_cast<int>(v)));
}

std::optional<std::array<double, 2>> HeadModel::project(double u, double v, View view, int size) {
  const double theta = (2 * u - 1) * kThetaRange * kDeg;
  const double phi = (2 * v - 1) * kPhiRange * kDeg;
  const double t = theta + yaw_degrees(view) * kDeg;
  if (std::cos(t) <= 0.0) return std::nullopt;
  const double a = kHalfWidth * size, b = kHalfHeight * size;
  return std::array<double, 2>{a * std::cos(phi) * std::sin(t) + 0.5 * size - 0.5, b * std::sin(phi) + 0.5 * size - 0.5};
}

std::optional<std::array<double, 2>> HeadModel::unproject(int x, int y, View view, int size) {
  const double a = kHalfWidth * size, b = kHalfHeight * size;
  const double px = x + 0.5 - 0.5 * size, py = y + 0.5 - 0.5 * size;
  if (std::abs(py) >= b) return std::nullopt;
  const double phi = std::asin(py / b);
  const double s = px / (a * std::cos(phi));
  if (std::abs(s) >= 1.0) return std::nullopt;
  const double theta = std::asin(s) - yaw_degrees(view) * kDeg;
  if (std::abs(theta) > kThetaRange * kDeg || std::abs(phi) > kPhiRange * kDeg) return std::nullopt;
  return std::array<double, 2>{0.5 + theta / (2 * kThetaRange * kDeg), 0.5 + phi / (2 * kPhiRange * kDeg)};
}

std::vector<std::pair<DomainImage, CorrespondenceField>> render_views(const IdentityParams& params, Domain domain,
                                                                      std::span<const View> views, int size,
                                                                      const RenderOptions& options) {
  validate(domain);
  for (View v : views) validate(v);
  if (size < 8) throw std::invalid_argument("render_views: size must be at least 8");
  const FaceTexture tex(params);
  const Lighting light = Lighting::from_seed(options.nuisance_seed);

  std::vector<std::pair<DomainImage, CorrespondenceField>> out;
  out.reserve(views.size());
  for (View view : views) {
    DomainImage img{Image(size, size), domain, view, params.id};
    CorrespondenceField corr(size, size);
    const double yaw = HeadModel::yaw_degrees(view) * kDeg;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const auto uv = HeadModel::unproject(x, y, view, size);
        if (!uv) continue;
        const std::size_t idx = static_cast<std::size_t>(y) * size + x;
        corr.valid[idx] = 1;
        corr.uv[2 * idx] = static_cast<float>((*uv)[0]);
        corr.uv[2 * idx + 1] = static_cast<float>((*uv)[1]);
        const auto c = sample_domain(tex, domain, (*uv)[0], (*uv)[1], yaw, light);
        for (int k = 0; k < 3; ++k) img.pixels.at(y, x, k) = static_cast<float>(c[static_cast<std::size_t>(k)]);
      }
    }
    out.emplace_back(std::move(img), std::move(corr));
  }
  return out;
}

Image render_uv(const IdentityParams& params, Domain domain, int uv_size) {
  validate(domain);
  if (domain == Domain::rgb) throw std::invalid_argument("render_uv: rgb has no lighting-free UV texture");
  const FaceTexture tex(params);
  const Lighting light = Lighting::from_seed(0);
  Image img(uv_size, uv_size);
  for (int y = 0; y < uv_size; ++y) {
    for (int x = 0; x < uv_size; ++x) {
      const double u = (x + 0.5) / uv_size, v = (y + 0.5) / uv_size;
      const auto c = sample_domain(tex, domain, u, v, 0.0, light);
      for (int k = 0; k < 3; ++k) img.at(y, x, k) = static_cast<float>(c[static_cast<std::size_t>(k)]);
    }
  }
  return img;
}

json DatasetManifest::to_json() const {
  json ids = json::array();
  for (const auto& mi : identities) {
    ids.push_back({{"params", idref::to_json(mi.params)}, {"split", mi.split}, {"captured", mi.captured}});
  }
  json ents = json::array();
  for (const auto& e : entries) {
    ents.push_back({{"identity_id", e.identity_id ? json(*e.identity_id) : json(nullptr)},
                    {"domain", to_string(e.domain)},
                    {"view", to_string(e.view)},
                    {"file", e.file},
                    {"correspondence", e.correspondence}});
  }
  return {{"format", "idref-dataset"}, {"version", 1},         {"seed", seed},
          {"image_size", image_size},  {"identities", ids},    {"entries", ents}};
}

DatasetManifest DatasetManifest::from_json(const json& j, const fs::path& root) {
  if (j.value("format", "") != "idref-dataset") throw DatasetError("not a dataset manifest");
  DatasetManifest m;
  m.root = root;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.image_size = j.at("image_size").get<int>();
  for (const auto& ji : j.at("identities")) {
    m.identities.push_back({identity_from_json(ji.at("params")), ji.at("split").get<std::string>(),
                            ji.at("captured").get<bool>()});
  }
  for (const auto& je : j.at("entries")) {
    ManifestEntry e;
    if (!je.at("identity_id").is_null()) e.identity_id = je.at("identity_id").get<int>();
    e.domain = parse_domain(je.at("domain").get<std::string>());
    e.view = parse_view(je.at("view").get<std::string>());
    e.file = je.at("file").get<std::string>();
    e.correspondence = je.value("correspondence", "");
    m.entries.push_back(std::move(e));
  }
  return m;
}

DatasetManifest DatasetManifest::load(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DatasetError("cannot read manifest " + manifest_path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DatasetError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return from_json(j, manifest_path.parent_path());
}

void DatasetManifest::save(const fs::path& manifest_path) const {
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw DatasetError("cannot write manifest " + manifest_path.string());
  out << to_json().dump(1) << "\n";
  if (!out) throw DatasetError("short write to " + manifest_path.string());
}

const ManifestIdentity* DatasetManifest::find_identity(int id) const {
  for (const auto& mi : identities)
    if (mi.params.id == id) return &mi;
  return nullptr;
}

void DatasetManifest::validate() const {
  std::set<int> train, test;
  for (const auto& mi : identities) {
    if (mi.split != "train" && mi.split != "test") throw DatasetError("bad split label '" + mi.split + "'");
    const int id = mi.params.id;
    if (train.count(id) || test.count(id)) throw DatasetError("identity " + std::to_string(id) + " listed twice");
    (mi.split == "train" ? train : test).insert(id);
  }
  for (const auto& e : entries) {
    if (!fs::exists(resolve(e.file))) throw DatasetError("missing file " + e.file);
    if (!e.correspondence.empty() && !is_checkpoint(resolve(e.correspondence))) {
      throw DatasetError("missing correspondence " + e.correspondence);
    }
    if (e.identity_id && !find_identity(*e.identity_id)) {
      throw DatasetError("entry references unknown identity " + std::to_string(*e.identity_id));
    }
  }
}

std::uint64_t identity_seed(std::uint64_t dataset_seed, int index) {
  return dataset_seed * 1000003ULL + static_cast<std::uint64_t>(index);
}

DatasetManifest build_dataset(const DatagenConfig& config, const fs::path& out_dir) {
  if (config.identities <= 0) throw DatasetError("identity count must be positive");
  if (config.split <= 0.0 || config.split >= 1.0) throw DatasetError("split must lie in (0, 1)");
  if (config.reflectance_ratio < 0.0 || config.reflectance_ratio > 1.0) {
    throw DatasetError("reflectance ratio must lie in [0, 1]");
  }
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (!ec) fs::create_directories(out_dir / "corr", ec);
  if (ec) throw DatasetError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  {
    std::ofstream probe(out_dir / ".write-test");
    if (!probe) throw DatasetError("output directory is not writable: " + out_dir.string());
  }
  fs::remove(out_dir / ".write-test", ec);

  const int n = config.identities;
  const int n_captured = static_cast<int>(std::lround(config.reflectance_ratio * n));
  const int n_train = std::clamp(static_cast<int>(std::lround(config.split * n)), 0, n);
  const int cap_train = std::min(n_captured, static_cast<int>(std::lround(config.split * n_captured)));
  const int rgb_train = std::clamp(n_train - cap_train, 0, n - n_captured);

  Rng rng(mix_seed(config.seed, 0xda7a));
  const std::vector<int> order = permutation(n, rng);
  std::vector<bool> captured(static_cast<std::size_t>(n), false), is_train(static_cast<std::size_t>(n), false);
  for (int k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(order[static_cast<std::size_t>(k)]);
    captured[i] = k < n_captured;
    is_train[i] = k < n_captured ? k < cap_train : (k - n_captured) < rgb_train;
  }

  DatasetManifest m;
  m.root = out_dir;
  m.seed = config.seed;
  m.image_size = config.image_size;
  for (int i = 0; i < n; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const IdentityParams params = generate_identity(identity_seed(config.seed, i));
    m.identities.push_back({params, is_train[si] ? "train" : "test", captured[si]});
    const std::string tag = id_tag(params.id);

    for (View view : kAllViews) {
      const std::string corr_rel = "corr/" + tag + "_" + to_string(view);
      std::vector<Domain> domains{Domain::rgb};
      if (captured[si]) domains.insert(domains.end(), kReflectanceDomains.begin(), kReflectanceDomains.end());
      bool corr_written = false;
      for (Domain d : domains) {
        RenderOptions opts;
        if (d == Domain::rgb) opts.nuisance_seed = mix_seed(identity_seed(config.seed, i), static_cast<int>(view) + 1);
        const View views[] = {view};
        auto rendered = render_views(params, d, views, config.image_size, opts);
        const std::string file_rel = "images/" + tag + "_" + to_string(d) + "_" + to_string(view) + ".png";
        write_png(out_dir / file_rel, rendered[0].first.pixels);
        if (!corr_written) {
          save_correspondence(out_dir / corr_rel, rendered[0].second);
          write_mask_png(out_dir / ("images/" + tag + "_mask_" + to_string(view) + ".png"), rendered[0].second.mask());
          corr_written = true;
        }
        m.entries.push_back({params.id, d, view, file_rel, corr_rel});
      }
    }
  }
  m.save(out_dir / "manifest.json");
  return m;
}

IngestResult ingest_folder(const fs::path& folder, Domain domain, int target_size) {
  validate(domain);
  IngestResult result;
  result.fragment.root = folder;
  result.fragment.image_size = target_size;
  if (!fs::is_directory(folder)) {
    result.errors.push_back(folder.string() + ": not a directory");
    return result;
  }
  std::vector<fs::path> files;
  for (const auto& de : fs::directory_iterator(folder))
    if (de.is_regular_file()) files.push_back(de.path());
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    try {
      Image img = resize(read_png(path), target_size, target_size);
      for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
      result.images.push_back({std::move(img), domain, View::frontal, std::nullopt});
      result.fragment.entries.push_back({std::nullopt, domain, View::frontal, path.filename().string(), ""});
    } catch (const std::exception& e) {
      result.errors.push_back(path.filename().string() + ": " + e.what());
    }
  }
  return result;
}

}  // namespace idref
