// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <optional>
#include <set>

#include "idref/datagen.hpp"
#include "idref/digest.hpp"
#include "idref/random.hpp"
#include "support/tempdir.hpp"

using namespace idref;
using idref::testing::TempDir;

namespace {

constexpr int kSize = 64;

std::string file_digest(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes.data(), bytes.size());
}

/// Brute-force inverse of a correspondence field: scans every fully valid
/// 2x2 pixel cell and solves the bilinear interpolant for (u, v) by Newton.
std::optional<std::array<double, 2>> invert_field(const CorrespondenceField& f, double u, double v) {
  for (int y = 0; y + 1 < f.height; ++y) {
    for (int x = 0; x + 1 < f.width; ++x) {
      if (!f.is_valid(y, x) || !f.is_valid(y, x + 1) || !f.is_valid(y + 1, x) || !f.is_valid(y + 1, x + 1)) continue;
      const double u00 = f.u(y, x), u10 = f.u(y, x + 1), u01 = f.u(y + 1, x), u11 = f.u(y + 1, x + 1);
      const double v00 = f.v(y, x), v10 = f.v(y, x + 1), v01 = f.v(y + 1, x), v11 = f.v(y + 1, x + 1);
      if (u < std::min({u00, u10, u01, u11}) || u > std::max({u00, u10, u01, u11})) continue;
      if (v < std::min({v00, v10, v01, v11}) || v > std::max({v00, v10, v01, v11})) continue;
      double s = 0.5, t = 0.5;
      for (int it = 0; it < 20; ++it) {
        const double fu = (1 - s) * (1 - t) * u00 + s * (1 - t) * u10 + (1 - s) * t * u01 + s * t * u11 - u;
        const double fv = (1 - s) * (1 - t) * v00 + s * (1 - t) * v10 + (1 - s) * t * v01 + s * t * v11 - v;
        const double us = (1 - t) * (u10 - u00) + t * (u11 - u01), ut = (1 - s) * (u01 - u00) + s * (u11 - u10);
        const double vs = (1 - t) * (v10 - v00) + t * (v11 - v01), vt = (1 - s) * (v01 - v00) + s * (v11 - v10);
        const double det = us * vt - ut * vs;
        if (std::abs(det) < 1e-18) break;
        s -= (fu * vt - fv * ut) / det;
        t -= (us * fv - vs * fu) / det;
      }
      if (s >= -1e-6 && s <= 1 + 1e-6 && t >= -1e-6 && t <= 1 + 1e-6) return std::array<double, 2>{x + s, y + t};
    }
  }
  return std::nullopt;
}

}  // namespace

TEST_CASE("generate_identity is deterministic and bounded") {
  CHECK(generate_identity(7) == generate_identity(7));
  const IdentityParams p = generate_identity(3);
  for (float g : p.geometry) {
    CHECK(g >= 0.0f);
    CHECK(g <= 1.0f);
  }
  for (float c : p.skin_tone) {
    CHECK(c >= 0.0f);
    CHECK(c <= 1.0f);
  }
  std::set<int> ids;
  std::vector<IdentityParams> all;
  for (int s = 0; s < 100; ++s) {
    all.push_back(generate_identity(static_cast<std::uint64_t>(s)));
    ids.insert(all.back().id);
  }
  CHECK(ids.size() == 100);
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j)
      CHECK((all[i].geometry != all[j].geometry || all[i].skin_tone != all[j].skin_tone));
}

TEST_CASE("identity params survive a JSON round trip") {
  const IdentityParams p = generate_identity(12345);
  CHECK(identity_from_json(nlohmann::json::parse(to_json(p).dump())) == p);
}

TEST_CASE("rendered domains honour their channel contracts") {
  const IdentityParams p = generate_identity(11);
  for (Domain d : kAllDomains) {
    const auto views = render_views(p, d, kAllViews, kSize);
    REQUIRE(views.size() == 3);
    for (const auto& [img, corr] : views) {
      CHECK(img.domain == d);
      CHECK(img.identity_id == p.id);
      for (int y = 0; y < kSize; ++y) {
        for (int x = 0; x < kSize; ++x) {
          for (int c = 0; c < 3; ++c) {
            const float v = img.pixels.at(y, x, c);
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
          }
          if (d == Domain::specular) {
            REQUIRE(img.pixels.at(y, x, 0) == 0.0f);
            REQUIRE(img.pixels.at(y, x, 1) == 0.0f);
          }
          if (d == Domain::roughness) {
            REQUIRE(img.pixels.at(y, x, 0) == img.pixels.at(y, x, 1));
            REQUIRE(img.pixels.at(y, x, 1) == img.pixels.at(y, x, 2));
          }
          if (d == Domain::normal && corr.is_valid(y, x)) {
            double n2 = 0.0;
            for (int c = 0; c < 3; ++c) n2 += std::pow(2.0 * img.pixels.at(y, x, c) - 1.0, 2);
            REQUIRE(std::abs(std::sqrt(n2) - 1.0) < 1e-3);
          }
        }
      }
    }
  }
}

TEST_CASE("silhouettes are identical across domains") {
  const IdentityParams p = generate_identity(5);
  const auto reference = render_views(p, Domain::rgb, kAllViews, kSize);
  for (Domain d : kAllDomains) {
    const auto views = render_views(p, d, kAllViews, kSize);
    for (std::size_t v = 0; v < 3; ++v) CHECK(views[v].second.valid == reference[v].second.valid);
  }
  const auto diffuse = render_views(p, Domain::diffuse, std::array{View::frontal}, kSize);
  const auto normal = render_views(p, Domain::normal, std::array{View::frontal}, kSize);
  CHECK(diffuse[0].second.valid == normal[0].second.valid);
}

TEST_CASE("unknown domain or view is rejected by name") {
  const IdentityParams p = generate_identity(1);
  CHECK_THROWS_AS(render_views(p, static_cast<Domain>(9), kAllViews, kSize), UnknownDomainError);
  const std::array bad{static_cast<View>(7)};
  CHECK_THROWS_AS(render_views(p, Domain::rgb, bad, kSize), UnknownViewError);
  CHECK_THROWS_AS(parse_domain("albedo"), UnknownDomainError);
  CHECK_THROWS_AS(parse_view("top"), UnknownViewError);
  CHECK(parse_domain("specular") == Domain::specular);
  CHECK(parse_view("left") == View::left);
}

TEST_CASE("correspondences are injective at rendered resolution") {
  const IdentityParams p = generate_identity(2);
  for (const auto& [img, corr] : render_views(p, Domain::diffuse, kAllViews, kSize)) {
    std::set<std::pair<int, int>> cells;
    std::size_t valid = 0;
    for (int y = 0; y < kSize; ++y) {
      for (int x = 0; x < kSize; ++x) {
        if (!corr.is_valid(y, x)) {
          CHECK(corr.u(y, x) == CorrespondenceField::kUvSentinel);
          continue;
        }
        ++valid;
        REQUIRE(corr.u(y, x) >= 0.0f);
        REQUIRE(corr.u(y, x) <= 1.0f);
        REQUIRE(corr.v(y, x) >= 0.0f);
        REQUIRE(corr.v(y, x) <= 1.0f);
        const int cu = std::min(static_cast<int>(corr.u(y, x) * kSize), kSize - 1);
        const int cv = std::min(static_cast<int>(corr.v(y, x) * kSize), kSize - 1);
        cells.insert({cu, cv});
      }
    }
    CHECK(valid > 1000);
    CHECK(cells.size() == valid);
  }
}

TEST_CASE("projection inverts the per-pixel correspondence") {
  for (View view : kAllViews) {
    for (int y = 0; y < kSize; ++y) {
      for (int x = 0; x < kSize; ++x) {
        const auto uv = HeadModel::unproject(x, y, view, kSize);
        if (!uv) continue;
        const auto px = HeadModel::project((*uv)[0], (*uv)[1], view, kSize);
        REQUIRE(px.has_value());
        REQUIRE(std::abs((*px)[0] - x) < 1e-6);
        REQUIRE(std::abs((*px)[1] - y) < 1e-6);
      }
    }
  }
}

TEST_CASE("left view round-trips through the frontal field within one pixel") {
  const IdentityParams p = generate_identity(4);
  const auto fields = render_views(p, Domain::diffuse, kAllViews, kSize);
  const CorrespondenceField& left = fields[0].second;
  const CorrespondenceField& front = fields[1].second;
  std::size_t overlap = 0;
  double worst = 0.0;
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      if (!left.is_valid(y, x)) continue;
      const auto q = invert_field(front, left.u(y, x), left.v(y, x));
      if (!q) continue;  // outside the frontal field's interpolation domain
      const auto fp = HeadModel::project(left.u(y, x), left.v(y, x), View::frontal, kSize);
      REQUIRE(fp.has_value());
      worst = std::max(worst, std::hypot((*q)[0] - (*fp)[0], (*q)[1] - (*fp)[1]));
      ++overlap;
    }
  }
  CHECK(overlap > 1000);
  CHECK(worst < 1.0);
}

TEST_CASE("nearest-centroid classifier separates identities from frontal rgb") {
  constexpr int kIds = 60, kTrainRenders = 3;
  const std::array front{View::frontal};
  std::vector<std::vector<float>> centroids(kIds);
  std::vector<std::vector<float>> probes(kIds);
  for (int i = 0; i < kIds; ++i) {
    const IdentityParams p = generate_identity(static_cast<std::uint64_t>(1000 + i));
    for (int r = 0; r <= kTrainRenders; ++r) {
      RenderOptions opts{mix_seed(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(r + 1))};
      const auto img = render_views(p, Domain::rgb, front, kSize, opts)[0].first.pixels.pixels;
      if (r == kTrainRenders) {
        probes[static_cast<std::size_t>(i)] = img;
        continue;
      }
      auto& c = centroids[static_cast<std::size_t>(i)];
      c.resize(img.size(), 0.0f);
      for (std::size_t k = 0; k < img.size(); ++k) c[k] += img[k] / kTrainRenders;
    }
  }
  int correct = 0;
  for (int i = 0; i < kIds; ++i) {
    int best = -1;
    double best_d = 1e30;
    for (int j = 0; j < kIds; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < probes[static_cast<std::size_t>(i)].size(); ++k) {
        const double diff = probes[static_cast<std::size_t>(i)][k] - centroids[static_cast<std::size_t>(j)][k];
        d += diff * diff;
      }
      if (d < best_d) best_d = d, best = j;
    }
    correct += best == i;
  }
  CHECK(correct >= static_cast<int>(std::ceil(0.95 * kIds)));
}

TEST_CASE("ground-truth UV textures match view renders at corresponding points") {
  const IdentityParams p = generate_identity(21);
  const Image uv = render_uv(p, Domain::diffuse, 512);
  const auto front = render_views(p, Domain::diffuse, std::array{View::frontal}, kSize)[0];
  double err = 0.0;
  int n = 0;
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      if (!front.second.is_valid(y, x)) continue;
      const int cx = std::min(static_cast<int>(front.second.u(y, x) * 512), 511);
      const int cy = std::min(static_cast<int>(front.second.v(y, x) * 512), 511);
      for (int c = 0; c < 3; ++c) err += std::abs(uv.at(cy, cx, c) - front.first.pixels.at(y, x, c));
      n += 3;
    }
  }
  CHECK(err / n < 0.02);
  CHECK_THROWS(render_uv(p, Domain::rgb, 64));
}

TEST_CASE("build_dataset splits, counts and reproduces") {
  TempDir tmp("datagen");
  DatagenConfig cfg;
  cfg.identities = 20;
  cfg.image_size = 32;
  cfg.split = 0.8;
  cfg.reflectance_ratio = 0.1;
  cfg.seed = 9;
  const DatasetManifest a = build_dataset(cfg, tmp / "a");
  const DatasetManifest b = build_dataset(cfg, tmp / "b");
  a.validate();
  CHECK(a.to_json() == b.to_json());
  CHECK(file_digest(tmp / "a" / a.entries[5].file) == file_digest(tmp / "b" / b.entries[5].file));
  CHECK(file_digest(tmp / "a/manifest.json") == file_digest(tmp / "b/manifest.json"));

  std::set<int> train, test;
  int captured = 0;
  for (const auto& mi : a.identities) {
    (mi.split == "train" ? train : test).insert(mi.params.id);
    captured += mi.captured;
  }
  CHECK(train.size() == 16);
  CHECK(test.size() == 4);
  for (int id : train) CHECK(test.count(id) == 0);

  std::set<int> rgb_ids, refl_ids;
  for (const auto& e : a.entries) (e.domain == Domain::rgb ? rgb_ids : refl_ids).insert(*e.identity_id);
  CHECK(captured == 2);
  CHECK(rgb_ids.size() == 20);
  CHECK(refl_ids.size() == 2);
  CHECK(rgb_ids.size() == 10 * refl_ids.size());

  const DatasetManifest loaded = DatasetManifest::load(tmp / "a/manifest.json");
  CHECK(loaded.to_json() == a.to_json());
  loaded.validate();

  const auto corr = load_correspondence(loaded.resolve(loaded.entries[0].correspondence));
  CHECK(corr.height == 32);
  const IdentityParams p = loaded.find_identity(*loaded.entries[0].identity_id)->params;
  const auto rendered = render_views(p, loaded.entries[0].domain, std::array{loaded.entries[0].view}, 32);
  CHECK(rendered[0].second.uv == corr.uv);
  CHECK(rendered[0].second.valid == corr.valid);
}

TEST_CASE("build_dataset rejects an unwritable directory") {
  DatagenConfig cfg;
  cfg.identities = 2;
  CHECK_THROWS_AS(build_dataset(cfg, "/proc/idref-no-such-dir"), DatasetError);
}

TEST_CASE("ingest_folder resizes, replicates grayscale and reports bad files") {
  TempDir tmp("ingest");
  CHECK(ingest_folder(tmp.path(), Domain::rgb, 64).fragment.entries.empty());

  Image big(512, 512);
  for (int y = 0; y < 512; ++y)
    for (int x = 0; x < 512; ++x)
      for (int c = 0; c < 3; ++c) big.at(y, x, c) = static_cast<float>((x + y + 40 * c) % 256) / 255.0f;
  write_png(tmp / "a.png", big);
  Mask gray(40, 40);
  for (int i = 0; i < 40 * 40; i += 3) gray.values[static_cast<std::size_t>(i)] = 1;
  write_mask_png(tmp / "b.png", gray);
  std::ofstream(tmp / "c.png") << "not really a png";

  const IngestResult r = ingest_folder(tmp.path(), Domain::diffuse, 64);
  REQUIRE(r.images.size() == 2);
  CHECK(r.errors.size() == 1);
  CHECK(r.fragment.entries.size() == 2);
  for (const auto& img : r.images) {
    CHECK(img.pixels.height == 64);
    CHECK(img.pixels.width == 64);
    CHECK(img.domain == Domain::diffuse);
    CHECK_FALSE(img.identity_id.has_value());
  }
  const Image& g = r.images[1].pixels;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      REQUIRE(g.at(y, x, 0) == g.at(y, x, 1));
      REQUIRE(g.at(y, x, 1) == g.at(y, x, 2));
    }
}

TEST_CASE("png round trip is exact at 8 bits") {
  TempDir tmp("png");
  Image img(5, 7);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>((i * 37) % 256) / 255.0f;
  write_png(tmp / "x.png", img);
  const Image back = read_png(tmp / "x.png");
  CHECK(back.pixels == img.pixels);
  CHECK_THROWS_AS(read_png(tmp / "missing.png"), ImageIoError);
}
