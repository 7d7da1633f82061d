// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/stitcher.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace idref {

namespace fs = std::filesystem;
using nlohmann::json;

void StitchConfig::validate() const {
  if (uv_size <= 0) throw StitchError("stitch: uv_size must be positive");
  if (!(gamma > 0.0f)) throw StitchError("stitch: gamma must be positive");
  if (band <= 0) throw StitchError("stitch: band must be positive");
  if (min_overlap < 16) throw StitchError("stitch: min_overlap must be at least 16");
}

json StitchConfig::to_json() const {
  return {{"uv_size", uv_size}, {"gamma", gamma}, {"band", band}, {"min_overlap", min_overlap}};
}

StitchConfig StitchConfig::from_json(const json& j) {
  StitchConfig c;
  c.uv_size = j.value("uv_size", c.uv_size);
  c.gamma = j.value("gamma", c.gamma);
  c.band = j.value("band", c.band);
  c.min_overlap = j.value("min_overlap", c.min_overlap);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Template library

TemplateLibrary TemplateLibrary::build(const Dataset& data, const std::string& split, const Embedder& embedder) {
  TemplateLibrary lib;
  lib.manifest = data.manifest().root / "manifest.json";
  lib.split = split;
  for (int id : data.identities(split, true)) {
    TemplateEntry e;
    e.identity_id = id;
    for (View v : kAllViews) {
      const auto vi = static_cast<std::size_t>(v);
      for (Domain d : kReflectanceDomains) {
        const int i = data.find(id, d, v);
        if (i < 0) throw DatasetError("template " + std::to_string(id) + " lacks " + to_string(d) + " " + to_string(v));
        e.images[d][vi] = {data.item(i).pixels, d, v, id};
      }
      const int r = data.find(id, Domain::rgb, v);
      if (r < 0) throw DatasetError("template " + std::to_string(id) + " lacks an rgb " + to_string(v) + " view");
      e.correspondence[vi] = load_correspondence(data.manifest().resolve(data.item(r).correspondence));
      if (v == View::frontal) e.frontal_rgb = {data.item(r).pixels, Domain::rgb, v, id};
    }
    e.embedding = embed_identity(e.frontal_rgb, embedder);
    lib.entries.push_back(std::move(e));
  }
  if (lib.entries.empty()) throw DatasetError("no captured identities in split '" + split + "'");
  return lib;
}

void TemplateLibrary::save(const fs::path& dir) const {
  fs::create_directories(dir);
  json ents = json::array();
  for (const auto& e : entries) ents.push_back({{"identity_id", e.identity_id}, {"embedding", e.embedding}});
  std::ofstream out(dir / "library.json");
  if (!out) throw StitchError("cannot write " + (dir / "library.json").string());
  out << json{{"format", "idref-library"}, {"manifest", manifest.string()}, {"split", split}, {"entries", ents}}.dump(2)
      << '\n';
}

TemplateLibrary TemplateLibrary::load(const fs::path& dir) {
  std::ifstream in(dir / "library.json");
  if (!in) throw StitchError("no library.json under " + dir.string());
  const json j = json::parse(in);
  if (j.value("format", "") != "idref-library") throw StitchError(dir.string() + " is not a template library");
  const Dataset data = Dataset::load(j.at("manifest").get<std::string>());
  TemplateLibrary lib;
  lib.manifest = j.at("manifest").get<std::string>();
  lib.split = j.at("split").get<std::string>();
  for (const auto& je : j.at("entries")) {
    const int id = je.at("identity_id").get<int>();
    TemplateEntry e;
    e.identity_id = id;
    e.embedding = je.at("embedding").get<std::vector<float>>();
    for (View v : kAllViews) {
      const auto vi = static_cast<std::size_t>(v);
      for (Domain d : kReflectanceDomains) {
        const int i = data.find(id, d, v);
        if (i < 0) throw StitchError("library entry " + std::to_string(id) + " missing from the dataset");
        e.images[d][vi] = {data.item(i).pixels, d, v, id};
      }
      const int r = data.find(id, Domain::rgb, v);
      if (r < 0) throw StitchError("library entry " + std::to_string(id) + " missing from the dataset");
      e.correspondence[vi] = load_correspondence(data.manifest().resolve(data.item(r).correspondence));
      if (v == View::frontal) e.frontal_rgb = {data.item(r).pixels, Domain::rgb, v, id};
    }
    lib.entries.push_back(std::move(e));
  }
  return lib;
}

const TemplateEntry* TemplateLibrary::find(int identity_id) const {
  for (const auto& e : entries)
    if (e.identity_id == identity_id) return &e;
  return nullptr;
}

const TemplateEntry& select_template(std::span<const float> e, const TemplateLibrary& library) {
  if (library.entries.empty()) throw StitchError("select_template: empty library");
  const TemplateEntry* best = nullptr;
  double best_cos = -std::numeric_limits<double>::infinity();
  for (const auto& entry : library.entries) {
    if (entry.embedding.size() != e.size()) throw StitchError("select_template: embedding size mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) {
      dot += static_cast<double>(e[i]) * entry.embedding[i];
      na += static_cast<double>(e[i]) * e[i];
      nb += static_cast<double>(entry.embedding[i]) * entry.embedding[i];
    }
    const double c = dot / std::max(std::sqrt(na * nb), 1e-30);
    if (c > best_cos || (c == best_cos && entry.identity_id < best->identity_id)) {
      best_cos = c;
      best = &entry;
    }
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Colour matching

std::array<double, 3> rgb_to_yuv(double r, double g, double b) {
  return {0.299 * r + 0.587 * g + 0.114 * b, -0.168736 * r - 0.331264 * g + 0.5 * b,
          0.5 * r - 0.418688 * g - 0.081312 * b};
}

std::array<double, 3> yuv_to_rgb(double y, double u, double v) {
  return {y + 1.402 * v, y - 0.344136 * u - 0.714136 * v, y + 1.772 * u};
}

DomainImage yuv_color_match(const DomainImage& src, const DomainImage& ref, const Mask& overlap) {
  const Image& s = src.pixels;
  const Image& r = ref.pixels;
  if (s.height != r.height || s.width != r.width || overlap.height != s.height || overlap.width != s.width) {
    throw StitchError("yuv_color_match: image and mask sizes differ");
  }
  if (overlap.count() < 16) {
    throw StitchError("yuv_color_match: overlap has " + std::to_string(overlap.count()) + " pixels, need 16");
  }
  if (src.domain != Domain::diffuse && src.domain != Domain::rgb) return src;

  const std::size_t n = static_cast<std::size_t>(s.height) * s.width;
  std::vector<std::array<double, 3>> ys(n), yr(n);
  for (std::size_t i = 0; i < n; ++i) {
    ys[i] = rgb_to_yuv(s.pixels[3 * i], s.pixels[3 * i + 1], s.pixels[3 * i + 2]);
    yr[i] = rgb_to_yuv(r.pixels[3 * i], r.pixels[3 * i + 1], r.pixels[3 * i + 2]);
  }
  std::array<double, 3> ms{}, mr{}, vs{}, vr{};
  const double count = static_cast<double>(overlap.count());
  for (std::size_t i = 0; i < n; ++i) {
    if (!overlap.values[i]) continue;
    for (int c = 0; c < 3; ++c) {
      ms[c] += ys[i][c];
      mr[c] += yr[i][c];
    }
  }
  for (int c = 0; c < 3; ++c) {
    ms[c] /= count;
    mr[c] /= count;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!overlap.values[i]) continue;
    for (int c = 0; c < 3; ++c) {
      vs[c] += (ys[i][c] - ms[c]) * (ys[i][c] - ms[c]);
      vr[c] += (yr[i][c] - mr[c]) * (yr[i][c] - mr[c]);
    }
  }
  std::array<double, 3> gain{};
  for (int c = 0; c < 3; ++c) {
    const double ss = std::sqrt(vs[c] / count), sr = std::sqrt(vr[c] / count);
    // A flat source channel cannot be stretched; it is only shifted.
    gain[c] = ss < 1e-8 ? 1.0 : sr / ss;
  }
  DomainImage out = src;
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 3> yuv;
    for (int c = 0; c < 3; ++c) yuv[c] = (ys[i][c] - ms[c]) * gain[c] + mr[c];
    const auto rgb = yuv_to_rgb(yuv[0], yuv[1], yuv[2]);
    for (int c = 0; c < 3; ++c) out.pixels.pixels[3 * i + c] = static_cast<float>(std::clamp(rgb[c], 0.0, 1.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Unwrapping and blending

Mask UvPartial::support() const {
  Mask m(color.height, color.width);
  for (std::size_t i = 0; i < weight.size(); ++i) m.values[i] = weight[i] > 0.0f ? 1 : 0;
  return m;
}

namespace {

struct Footprint {
  int x0, y0;
  double fx, fy;
};

Footprint footprint(double u, double v, int size) {
  const double gx = u * size - 0.5, gy = v * size - 0.5;
  const double x0 = std::floor(gx), y0 = std::floor(gy);
  return {static_cast<int>(x0), static_cast<int>(y0), gx - x0, gy - y0};
}

}  // namespace

UvPartial unwrap_view(const Image& img, const CorrespondenceField& corr, int uv_size) {
  if (corr.height != img.height || corr.width != img.width) {
    throw StitchError("unwrap_view: correspondence and image sizes differ");
  }
  // Each quad of valid pixels is split into two triangles that are
  // rasterised at UV cell centres with barycentric colour interpolation.
  const std::size_t cells = static_cast<std::size_t>(uv_size) * uv_size;
  std::vector<double> acc(cells * 3, 0.0), mass(cells, 0.0);
  struct Vert {
    double gx, gy;
    int y, x;
  };
  auto vert = [&](int y, int x) {
    return Vert{corr.u(y, x) * uv_size - 0.5, corr.v(y, x) * uv_size - 0.5, y, x};
  };
  auto raster = [&](const Vert& a, const Vert& b, const Vert& c) {
    const double area = (b.gx - a.gx) * (c.gy - a.gy) - (c.gx - a.gx) * (b.gy - a.gy);
    if (std::abs(area) < 1e-12) return;
    const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({a.gx, b.gx, c.gx}) - 1e-9)));
    const int x1 = std::min(uv_size - 1, static_cast<int>(std::floor(std::max({a.gx, b.gx, c.gx}) + 1e-9)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({a.gy, b.gy, c.gy}) - 1e-9)));
    const int y1 = std::min(uv_size - 1, static_cast<int>(std::floor(std::max({a.gy, b.gy, c.gy}) + 1e-9)));
    for (int cy = y0; cy <= y1; ++cy)
      for (int cx = x0; cx <= x1; ++cx) {
        const double wa = ((b.gx - cx) * (c.gy - cy) - (c.gx - cx) * (b.gy - cy)) / area;
        const double wb = ((c.gx - cx) * (a.gy - cy) - (a.gx - cx) * (c.gy - cy)) / area;
        const double wc = 1.0 - wa - wb;
        if (wa < -1e-9 || wb < -1e-9 || wc < -1e-9) continue;
        const std::size_t cell = static_cast<std::size_t>(cy) * uv_size + cx;
        mass[cell] += 1.0;
        for (int k = 0; k < 3; ++k) {
          acc[3 * cell + k] += wa * img.at(a.y, a.x, k) + wb * img.at(b.y, b.x, k) + wc * img.at(c.y, c.x, k);
        }
      }
  };
  for (int y = 0; y + 1 < img.height; ++y)
    for (int x = 0; x + 1 < img.width; ++x) {
      if (!corr.is_valid(y, x) || !corr.is_valid(y, x + 1) || !corr.is_valid(y + 1, x) ||
          !corr.is_valid(y + 1, x + 1)) {
        continue;
      }
      const Vert p00 = vert(y, x), p01 = vert(y, x + 1), p10 = vert(y + 1, x), p11 = vert(y + 1, x + 1);
      raster(p00, p01, p11);
      raster(p00, p11, p10);
    }
  UvPartial p{Image(uv_size, uv_size), std::vector<float>(cells, 0.0f)};
  for (std::size_t c = 0; c < cells; ++c) {
    if (mass[c] <= 0.0) continue;
    p.weight[c] = static_cast<float>(mass[c]);
    for (int k = 0; k < 3; ++k) p.color.pixels[3 * c + k] = static_cast<float>(acc[3 * c + k] / mass[c]);
  }
  return p;
}

bool sample_uv(const UvPartial& p, double u, double v, std::array<float, 3>& out) {
  const int size = p.size();
  const Footprint f = footprint(u, v, size);
  double acc[3] = {0, 0, 0}, wsum = 0.0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const int cx = f.x0 + dx, cy = f.y0 + dy;
      if (cx < 0 || cy < 0 || cx >= size || cy >= size) continue;
      const std::size_t c = static_cast<std::size_t>(cy) * size + cx;
      if (p.weight[c] <= 0.0f) continue;
      const double w = (dx ? f.fx : 1.0 - f.fx) * (dy ? f.fy : 1.0 - f.fy);
      wsum += w;
      for (int k = 0; k < 3; ++k) acc[k] += w * p.color.pixels[3 * c + k];
    }
  if (wsum <= 0.0) return false;
  for (int k = 0; k < 3; ++k) out[static_cast<std::size_t>(k)] = static_cast<float>(acc[k] / wsum);
  return true;
}

namespace {

/// One-dimensional squared distance transform of a sampled function.
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[static_cast<std::size_t>(q)] + double(q) * q) - (f[static_cast<std::size_t>(p)] + double(p) * p)) /
          (2.0 * (q - p));
      if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[static_cast<std::size_t>(k)]) {
      // Only possible when k == 0 with an infinite left boundary.
      v[0] = q;
      continue;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
    const int p = v[static_cast<std::size_t>(k)];
    d[static_cast<std::size_t>(q)] = double(q - p) * (q - p) + f[static_cast<std::size_t>(p)];
  }
}

}  // namespace

namespace {

/// Distance from each cell of `inside` to the nearest `source` cell over
/// `band`, clamped to [0,1]; 1 when there are no sources, 0 outside `inside`.
std::vector<float> ramp(const Mask& inside, const Mask& source, int band) {
  const int h = inside.height, w = inside.width;
  constexpr double kInf = 1e20;
  std::vector<double> g(static_cast<std::size_t>(h) * w, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = source.values[i] ? 0.0 : kInf;
  std::vector<double> col(static_cast<std::size_t>(h)), out_col(static_cast<std::size_t>(h));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) col[static_cast<std::size_t>(y)] = g[static_cast<std::size_t>(y) * w + x];
    edt_1d(col, out_col);
    for (int y = 0; y < h; ++y) g[static_cast<std::size_t>(y) * w + x] = out_col[static_cast<std::size_t>(y)];
  }
  std::vector<double> row(static_cast<std::size_t>(w)), out_row(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) row[static_cast<std::size_t>(x)] = g[static_cast<std::size_t>(y) * w + x];
    edt_1d(row, out_row);
    for (int x = 0; x < w; ++x) g[static_cast<std::size_t>(y) * w + x] = out_row[static_cast<std::size_t>(x)];
  }
  std::vector<float> f(g.size(), 0.0f);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (inside.values[i]) f[i] = static_cast<float>(std::min(1.0, std::sqrt(g[i]) / band));
  }
  return f;
}

/// Cells in `a` but not in `b`.
Mask minus(const Mask& a, const Mask& b) {
  Mask m(a.height, a.width);
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = a.values[i] && !b.values[i];
  return m;
}

}  // namespace

std::vector<float> feather(const Mask& support, int band) {
  Mask outside(support.height, support.width);
  for (std::size_t i = 0; i < outside.values.size(); ++i) outside.values[i] = !support.values[i];
  return ramp(support, outside, band);
}

BlendResult blend_views(std::span<const UvPartial> partials, const StitchConfig& cfg, const UvPartial* fallback) {
  if (partials.size() != 3) throw StitchError("blend_views: expected left, frontal and right partials");
  const int size = partials[0].size();
  for (const auto& p : partials) {
    if (p.size() != size || p.color.width != size) throw StitchError("blend_views: UV grids differ in size");
  }
  if (fallback && fallback->size() != size) throw StitchError("blend_views: fallback grid differs in size");
  const auto L = static_cast<std::size_t>(View::left), F = static_cast<std::size_t>(View::frontal),
             R = static_cast<std::size_t>(View::right);
  const Mask ml = partials[L].support(), mf = partials[F].support(), mr = partials[R].support();
  if (ml.count() + mf.count() + mr.count() == 0) throw StitchError("blend_views: every view is empty");
  Mask ms(size, size);
  for (std::size_t i = 0; i < ms.values.size(); ++i) ms.values[i] = ml.values[i] || mr.values[i];
  // Each view ramps up from the cells where only the view it competes with is
  // present; edges facing uncovered space are not seams.
  const auto wl = ramp(ml, minus(mr, ml), cfg.band), wr = ramp(mr, minus(ml, mr), cfg.band);
  const auto wf = ramp(mf, minus(ms, mf), cfg.band), ws = ramp(ms, minus(mf, ms), cfg.band);

  const double gamma = cfg.gamma;
  BlendResult out{Image(size, size), Mask(size, size)};
  const std::size_t cells = static_cast<std::size_t>(size) * size;
  for (std::size_t c = 0; c < cells; ++c) {
    const double fl = wl[c], fr = wr[c], ff = wf[c], fs = ws[c];
    if (ff <= 0.0 && fs <= 0.0) {
      if (fallback && fallback->weight[c] > 0.0f) {
        for (int k = 0; k < 3; ++k) out.color.pixels[3 * c + k] = fallback->color.pixels[3 * c + k];
        out.mask.values[c] = 1;
      }
      continue;
    }
    out.mask.values[c] = 1;
    for (int k = 0; k < 3; ++k) {
      double side = 0.0;
      if (fs > 0.0) {
        side = (fl * partials[L].color.pixels[3 * c + k] + fr * partials[R].color.pixels[3 * c + k]) / (fl + fr);
      }
      double value;
      if (fs <= 0.0) {
        value = partials[F].color.pixels[3 * c + k];
      } else if (ff <= 0.0) {
        value = side;
      } else {
        const double alpha = ff * (1.0 + gamma - fs) / (1.0 + gamma);
        value = alpha * partials[F].color.pixels[3 * c + k] + (1.0 - alpha) * side;
      }
      out.color.pixels[3 * c + k] = static_cast<float>(value);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Assets and the full inference path

void UvAsset::save(const fs::path& dir) const {
  fs::create_directories(dir);
  json domains = json::array();
  for (const auto& [d, img] : maps) {
    write_png(dir / (to_string(d) + ".png"), img);
    domains.push_back(to_string(d));
  }
  write_mask_png(dir / "mask.png", mask);
  std::ofstream out(dir / "provenance.json");
  if (!out) throw StitchError("cannot write " + (dir / "provenance.json").string());
  out << json{{"template_id", template_id},
              {"input_id", input_id ? json(*input_id) : json(nullptr)},
              {"uv_size", mask.height},
              {"domains", domains}}
             .dump(2)
      << '\n';
}

UvAsset reflectance_infer(const DomainImage& face, const TemplateLibrary& library, const SwapModels& models,
                          const StitchConfig& cfg) {
  cfg.validate();
  models.require_complete();
  const std::vector<float> e = embed_identity(face, *models.embedder);
  const TemplateEntry& tmpl = select_template(e, library);

  UvAsset asset;
  asset.template_id = tmpl.identity_id;
  asset.input_id = face.identity_id;
  for (Domain d : kReflectanceDomains) {
    std::vector<UvPartial> parts, own;
    for (View v : kAllViews) {
      const auto vi = static_cast<std::size_t>(v);
      const DomainImage swapped = swap(tmpl.images.at(d)[vi], face, models);
      parts.push_back(unwrap_view(swapped.pixels, tmpl.correspondence[vi], cfg.uv_size));
      own.push_back(unwrap_view(tmpl.images.at(d)[vi].pixels, tmpl.correspondence[vi], cfg.uv_size));
    }
    if (d == Domain::diffuse) {
      const auto F = static_cast<std::size_t>(View::frontal);
      const Mask front = parts[F].support();
      for (View side : {View::left, View::right}) {
        auto& p = parts[static_cast<std::size_t>(side)];
        Mask overlap = p.support();
        for (std::size_t c = 0; c < overlap.values.size(); ++c) overlap.values[c] &= front.values[c];
        if (static_cast<int>(overlap.count()) < cfg.min_overlap) continue;
        const DomainImage matched =
            yuv_color_match({p.color, d, side, std::nullopt}, {parts[F].color, d, View::frontal, std::nullopt}, overlap);
        for (std::size_t c = 0; c < p.weight.size(); ++c) {
          if (p.weight[c] <= 0.0f) continue;
          for (int k = 0; k < 3; ++k) p.color.pixels[3 * c + k] = matched.pixels.pixels[3 * c + k];
        }
      }
    }
    const BlendResult fill = blend_views(own, cfg);
    UvPartial fallback{fill.color, std::vector<float>(fill.mask.values.begin(), fill.mask.values.end())};
    BlendResult b = blend_views(parts, cfg, &fallback);
    asset.maps[d] = std::move(b.color);
    if (asset.mask.values.empty()) {
      asset.mask = b.mask;
    } else if (asset.mask.values != b.mask.values) {
      throw StitchError("reflectance_infer: domain masks disagree");
    }
  }
  return asset;
}

}  // namespace idref
