// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace idref {

namespace fs = std::filesystem;
namespace ag = idref::nn;
using nlohmann::json;

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.pixels.size() != b.pixels.size()) {
    throw MetricsError(std::string(what) + ": images differ in shape (" + std::to_string(a.height) + "x" +
                       std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) +
                       ")");
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  if (a.pixels.empty()) throw MetricsError("psnr: empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

json SsimConfig::to_json() const {
  return {{"window", window}, {"k1", k1}, {"k2", k2}, {"data_range", data_range}};
}

SsimConfig SsimConfig::from_json(const json& j) {
  SsimConfig c;
  c.window = j.value("window", c.window);
  c.k1 = j.value("k1", c.k1);
  c.k2 = j.value("k2", c.k2);
  c.data_range = j.value("data_range", c.data_range);
  if (c.window < 2 || c.window % 2 == 0) throw MetricsError("ssim: window must be odd and at least 3");
  return c;
}

std::vector<double> luminance(const Image& img) {
  std::vector<double> y(static_cast<std::size_t>(img.height) * img.width);
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
  }
  return y;
}

double ssim(const Image& a, const Image& b, const SsimConfig& cfg) {
  require_same_shape(a, b, "ssim");
  const int w = cfg.window;
  if (a.height < w || a.width < w) throw MetricsError("ssim: image smaller than the window");
  const auto ya = luminance(a), yb = luminance(b);
  const double c1 = std::pow(cfg.k1 * cfg.data_range, 2), c2 = std::pow(cfg.k2 * cfg.data_range, 2);
  const double np = static_cast<double>(w) * w;
  const double cov_norm = np / (np - 1.0);
  double total = 0.0;
  long count = 0;
  for (int y0 = 0; y0 + w <= a.height; ++y0)
    for (int x0 = 0; x0 + w <= a.width; ++x0) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int y = y0; y < y0 + w; ++y)
        for (int x = x0; x < x0 + w; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * a.width + x;
          sa += ya[i];
          sb += yb[i];
          saa += ya[i] * ya[i];
          sbb += yb[i] * yb[i];
          sab += ya[i] * yb[i];
        }
      const double ma = sa / np, mb = sb / np;
      const double va = cov_norm * (saa / np - ma * ma), vb = cov_norm * (sbb / np - mb * mb);
      const double cab = cov_norm * (sab / np - ma * mb);
      total += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

double perceptual_distance(const Image& a, const Image& b, const FeatureNet& net) {
  require_same_shape(a, b, "perceptual_distance");
  ag::NoGradGuard ng;
  return static_cast<double>(
      perceptual_loss(ag::constant(to_tensor(a)), ag::constant(to_tensor(b)), net)->value[0]);
}

EmbedFn oracle_embedder(const DatasetManifest& manifest, int dim) {
  return [manifest, dim](const DomainImage& img) {
    if (!img.identity_id) throw MetricsError("oracle embedder: image has no identity id");
    const ManifestIdentity* mi = manifest.find_identity(*img.identity_id);
    if (!mi) throw MetricsError("oracle embedder: unknown identity " + std::to_string(*img.identity_id));
    return oracle_embedding(mi->params, dim);
  };
}

EmbedFn learned_embedder(const Embedder& embedder) {
  return [&embedder](const DomainImage& img) { return embed_identity(img, embedder); };
}

double id_similarity(const DomainImage& a, const DomainImage& b, const EmbedFn& embed) {
  const auto ea = embed(a), eb = embed(b);
  if (ea.size() != eb.size() || ea.empty()) throw MetricsError("id_similarity: embedding sizes differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    dot += static_cast<double>(ea[i]) * eb[i];
    na += static_cast<double>(ea[i]) * ea[i];
    nb += static_cast<double>(eb[i]) * eb[i];
  }
  return std::clamp(dot / std::max(std::sqrt(na * nb), 1e-30), -1.0, 1.0);
}

double id_similarity(const DomainImage& a, const DomainImage& b, const Embedder& embedder) {
  return id_similarity(a, b, learned_embedder(embedder));
}

json PairScore::to_json() const {
  json j{{"label", label}, {"psnr", psnr}, {"ssim", ssim}, {"perceptual_proxy", perceptual}};
  if (identity) j["identity"] = *identity;
  return j;
}

PairScore score_pair(const std::string& label, const Image& output, const Image& reference, const FeatureNet& proxy,
                     const SsimConfig& ssim_cfg) {
  PairScore s;
  s.label = label;
  s.psnr = psnr(output, reference);
  s.ssim = ssim(output, reference, ssim_cfg);
  s.perceptual = perceptual_distance(output, reference, proxy);
  return s;
}

json aggregate(const std::vector<PairScore>& pairs) {
  std::vector<double> p, s, l, id;
  for (const auto& e : pairs) {
    p.push_back(e.psnr);
    s.push_back(e.ssim);
    l.push_back(e.perceptual);
    if (e.identity) id.push_back(*e.identity);
  }
  json j{{"count", pairs.size()}, {"psnr", mean_of(p)}, {"ssim", mean_of(s)}, {"perceptual_proxy", mean_of(l)}};
  if (!id.empty()) j["identity"] = mean_of(id);
  return j;
}

json MetricReport::to_json() const {
  json ps = json::array();
  for (const auto& p : pairs) ps.push_back(p.to_json());
  json j{{"schema", kReportSchema},
         {"kind", kind},
         {"meta", meta},
         {"columns",
          {{"psnr", "dB, capped at 99"},
           {"ssim", "mean local SSIM of luminance"},
           {"perceptual_proxy", std::string(kPerceptualLabel) +
                                    ": fixed random-feature extractor; not comparable to LPIPS"},
           {"identity", "cosine of identity embeddings"}}},
         {"pairs", ps},
         {"aggregate", aggregate(pairs)}};
  for (const auto& [k, v] : body.items()) j[k] = v;
  return j;
}

void MetricReport::save(const fs::path& file) const {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw MetricsError("cannot write " + file.string());
  out << to_json().dump(2) << '\n';
}

std::vector<std::string> validate_report(const json& r) {
  std::vector<std::string> errs;
  auto number_in = [&](const json& v, const std::string& where, double lo, double hi) {
    if (!v.is_number()) {
      errs.push_back(where + " is not a number");
    } else if (v.get<double>() < lo || v.get<double>() > hi) {
      errs.push_back(where + " = " + v.dump() + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
  };
  if (!r.is_object()) return {"report is not an object"};
  if (r.value("schema", "") != kReportSchema) errs.push_back("schema is not " + std::string(kReportSchema));
  const std::string kind = r.value("kind", "");
  if (kind != "metrics" && kind != "ablation" && kind != "probe") errs.push_back("unknown kind '" + kind + "'");
  if (!r.contains("meta") || !r["meta"].is_object()) errs.push_back("meta must be an object");
  if (!r.contains("columns") || r["columns"].value("perceptual_proxy", "").rfind(kPerceptualLabel, 0) != 0) {
    errs.push_back("perceptual column must be labelled '" + std::string(kPerceptualLabel) + "'");
  }
  if (!r.contains("pairs") || !r["pairs"].is_array()) {
    errs.push_back("pairs must be an array");
  } else {
    for (std::size_t i = 0; i < r["pairs"].size(); ++i) {
      const json& p = r["pairs"][i];
      const std::string at = "pairs[" + std::to_string(i) + "]";
      if (!p.contains("label") || !p["label"].is_string()) errs.push_back(at + ".label missing");
      number_in(p.value("psnr", json()), at + ".psnr", 0.0, kPsnrCap);
      number_in(p.value("ssim", json()), at + ".ssim", -1.0, 1.0);
      number_in(p.value("perceptual_proxy", json()), at + ".perceptual_proxy", 0.0, 1e30);
      if (p.contains("identity")) number_in(p["identity"], at + ".identity", -1.0, 1.0);
    }
  }
  if (!r.contains("aggregate") || !r["aggregate"].is_object()) {
    errs.push_back("aggregate must be an object");
  } else if (!r["aggregate"].value("count", json()).is_number_integer()) {
    errs.push_back("aggregate.count missing");
  }
  if (kind == "ablation") {
    if (!r.contains("domains") || !r["domains"].is_object()) {
      errs.push_back("ablation needs domains");
    } else {
      for (Domain d : kReflectanceDomains) {
        const std::string key = to_string(d);
        if (!r["domains"].contains(key)) {
          errs.push_back("domains." + key + " missing");
          continue;
        }
        for (const char* arm : {"joint", "multi"}) {
          number_in(r["domains"][key].value(arm, json()), "domains." + key + "." + arm, 0.0, kPsnrCap);
        }
      }
    }
    if (!r.contains("mean") || !r["mean"].is_object()) errs.push_back("ablation needs mean");
    if (!r.contains("swap")) errs.push_back("ablation needs swap (null when unavailable)");
  }
  if (kind == "probe") {
    number_in(r.value("test_accuracy", json()), "test_accuracy", 0.0, 1.0);
    number_in(r.value("train_accuracy", json()), "train_accuracy", 0.0, 1.0);
    if (!r.value("classes", json()).is_number_integer()) errs.push_back("classes missing");
  }
  if (kind == "metrics" && r.contains("identity") && r["identity"].is_object()) {
    number_in(r["identity"].value("mean", json()), "identity.mean", -1.0, 1.0);
  }
  return errs;
}

json describe_state(const ModelState& state) {
  json stages = json::array();
  for (Stage s : state.stages) stages.push_back(to_string(s));
  return {{"model", state.config.to_json()}, {"stages", stages}, {"digests", state.digests()}};
}

Image reconstruct_reflectance(const ModelState& state, const Image& img) {
  ag::NoGradGuard ng;
  const Var x = ag::constant(to_tensor(img));
  if (state.fusion) {
    const FusedLatent lat = fused_latent(state.base, *state.bank, *state.fusion, x);
    return from_tensor(state.base.decode(lat.fused).image->value);
  }
  return from_tensor(state.base.reconstruct(x).image->value);
}

namespace {

/// Resizes to the model resolution when needed.
Image at_size(const Image& img, int size) { return img.height == size && img.width == size ? img : resize(img, size, size); }

}  // namespace

MetricReport evaluate_model(const ModelState& state, const Dataset& data, const TemplateLibrary* library,
                            const SsimConfig& ssim_cfg) {
  MetricReport r;
  r.kind = "metrics";
  r.meta = {{"checkpoint", describe_state(state)},
            {"split", "test"},
            {"ssim", ssim_cfg.to_json()},
            {"provenance", "all metrics on the synthetic test split"}};
  const int size = state.config.vq.image_size;
  for (Domain d : kReflectanceDomains) {
    for (int i : data.select("test", d)) {
      const auto& item = data.item(i);
      const Image ref = at_size(item.pixels, size);
      r.pairs.push_back(score_pair(to_string(d) + "/" + std::to_string(item.identity) + "/" + to_string(item.view),
                                   reconstruct_reflectance(state, ref), ref, state.perceptual, ssim_cfg));
    }
  }
  const SwapModels models = state.swap_models();
  if (library && models.swapper && models.embedder) {
    ag::NoGradGuard ng;
    json faces = json::array();
    std::vector<double> cos;
    for (int i : data.select("test", Domain::rgb)) {
      const auto& item = data.item(i);
      if (item.view != View::frontal) continue;
      const DomainImage face{item.pixels, Domain::rgb, View::frontal, item.identity};
      const TemplateEntry& t = select_template(embed_identity(face, *models.embedder), *library);
      const DomainImage out = swap(t.frontal_rgb, face, models);
      const double c = id_similarity(out, face, *models.embedder);
      cos.push_back(c);
      faces.push_back({{"identity", item.identity}, {"template", t.identity_id}, {"cosine", c}});
    }
    r.body["identity"] = {{"faces", faces}, {"mean", mean_of(cos)}};
  }
  return r;
}

MetricReport ablate_codebooks(const ModelState& joint, const ModelState& multi, const Dataset& data,
                              const TemplateLibrary* library) {
  if (joint.config.vq.image_size != multi.config.vq.image_size) {
    throw MetricsError("ablate: the two arms use different image sizes");
  }
  MetricReport r;
  r.kind = "ablation";
  r.meta = {{"joint", describe_state(joint)}, {"multi", describe_state(multi)}, {"split", "test"}};
  const int size = multi.config.vq.image_size;
  json domains = json::object();
  std::vector<double> mj, mm;
  for (Domain d : kReflectanceDomains) {
    const auto idx = data.select("test", d);
    if (idx.empty()) throw MissingDomainError("ablate: no held-out " + to_string(d) + " images");
    std::vector<double> pj, pm;
    for (int i : idx) {
      const Image ref = at_size(data.item(i).pixels, size);
      pj.push_back(psnr(reconstruct_reflectance(joint, ref), ref));
      pm.push_back(psnr(reconstruct_reflectance(multi, ref), ref));
    }
    domains[to_string(d)] = {{"joint", mean_of(pj)}, {"multi", mean_of(pm)}, {"images", idx.size()}};
    mj.push_back(mean_of(pj));
    mm.push_back(mean_of(pm));
  }
  r.body["domains"] = domains;
  r.body["mean"] = {{"joint", mean_of(mj)}, {"multi", mean_of(mm)}, {"gain", mean_of(mm) - mean_of(mj)}};

  json swap_rows = nullptr;
  const SwapModels models = multi.swap_models();
  const auto targets = data.identities("test", true);
  if (library && !library->entries.empty() && models.swapper && models.embedder && !targets.empty()) {
    ag::NoGradGuard ng;
    std::vector<double> fixed, closest;
    const TemplateEntry& fixed_t = library->entries.front();
    for (int id : targets) {
      const int fi = data.find(id, Domain::rgb, View::frontal);
      if (fi < 0) continue;
      const DomainImage face{data.item(fi).pixels, Domain::rgb, View::frontal, id};
      const TemplateEntry& near_t = select_template(embed_identity(face, *models.embedder), *library);
      for (Domain d : kReflectanceDomains)
        for (View v : kAllViews) {
          const int gi = data.find(id, d, v);
          if (gi < 0) continue;
          const Image gt = at_size(data.item(gi).pixels, size);
          const auto vi = static_cast<std::size_t>(v);
          fixed.push_back(psnr(at_size(swap(fixed_t.images.at(d)[vi], face, models).pixels, size), gt));
          closest.push_back(psnr(at_size(swap(near_t.images.at(d)[vi], face, models).pixels, size), gt));
        }
    }
    swap_rows = {{"fixed_template", mean_of(fixed)},
                 {"closest_template", mean_of(closest)},
                 {"fixed_template_id", fixed_t.identity_id},
                 {"targets", targets.size()}};
  }
  r.body["swap"] = swap_rows;
  return r;
}

json ProbeConfig::to_json() const {
  return {{"iterations", iterations}, {"lr", lr}, {"l2", l2}, {"max_images", max_images}};
}

ProbeConfig ProbeConfig::from_json(const json& j) {
  ProbeConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.lr = j.value("lr", c.lr);
  c.l2 = j.value("l2", c.l2);
  c.max_images = j.value("max_images", c.max_images);
  if (c.iterations < 0 || !(c.lr > 0.0) || c.max_images <= 0) throw MetricsError("probe: invalid configuration");
  return c;
}

ProbeResult linear_probe(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                         const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y, int classes,
                         const ProbeConfig& cfg) {
  if (train_x.empty() || train_x.size() != train_y.size() || test_x.size() != test_y.size()) {
    throw MetricsError("probe: empty or mismatched samples");
  }
  const std::size_t dim = train_x.front().size();
  std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
  for (const auto& x : train_x) {
    if (x.size() != dim) throw MetricsError("probe: ragged features");
    for (std::size_t k = 0; k < dim; ++k) mean[k] += x[k];
  }
  const double n = static_cast<double>(train_x.size());
  for (auto& m : mean) m /= n;
  for (const auto& x : train_x)
    for (std::size_t k = 0; k < dim; ++k) sd[k] += (x[k] - mean[k]) * (x[k] - mean[k]);
  for (auto& s : sd) s = std::sqrt(s / n) + 1e-8;
  auto standardise = [&](const std::vector<std::vector<double>>& xs) {
    std::vector<std::vector<double>> out(xs.size(), std::vector<double>(dim + 1, 1.0));
    for (std::size_t i = 0; i < xs.size(); ++i)
      for (std::size_t k = 0; k < dim; ++k) out[i][k] = (xs[i][k] - mean[k]) / sd[k];
    return out;
  };
  const auto xtr = standardise(train_x), xte = standardise(test_x);
  const std::size_t cols = dim + 1;  // last column is the bias
  const auto c = static_cast<std::size_t>(classes);
  std::vector<double> w(c * cols, 0.0), grad(c * cols), logits(c);
  auto scores = [&](const std::vector<double>& x) {
    for (std::size_t k = 0; k < c; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += w[k * cols + j] * x[j];
      logits[k] = s;
    }
  };
  for (int it = 0; it < cfg.iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < xtr.size(); ++i) {
      scores(xtr[i]);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t k = 0; k < c; ++k) {
        const double g = logits[k] / z - (static_cast<int>(k) == train_y[i] ? 1.0 : 0.0);
        for (std::size_t j = 0; j < cols; ++j) grad[k * cols + j] += g * xtr[i][j];
      }
    }
    for (std::size_t q = 0; q < w.size(); ++q) w[q] -= cfg.lr * (grad[q] / n + cfg.l2 * w[q]);
  }
  auto accuracy = [&](const std::vector<std::vector<double>>& xs, const std::vector<int>& ys) {
    if (xs.empty()) return 0.0;
    long hit = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      scores(xs[i]);
      const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
      hit += best == ys[i];
    }
    return static_cast<double>(hit) / static_cast<double>(xs.size());
  };
  ProbeResult r;
  r.classes = classes;
  r.train_accuracy = accuracy(xtr, train_y);
  r.test_accuracy = accuracy(xte, test_y);
  r.train_samples = static_cast<long>(xtr.size());
  r.test_samples = static_cast<long>(xte.size());
  return r;
}

MetricReport latent_separability(const ModelState& state, const Dataset& data, const ProbeConfig& cfg) {
  if (!state.fusion) throw PrerequisiteError("probe: the checkpoint has no fusion network");
  ag::NoGradGuard ng;
  const int size = state.config.vq.image_size;
  std::vector<std::vector<double>> xs[2];
  std::vector<int> ys[2];
  for (std::size_t d = 0; d < kAllDomains.size(); ++d) {
    const char* splits[2] = {"train", "test"};
    for (int s = 0; s < 2; ++s) {
      auto idx = data.select(splits[s], kAllDomains[d]);
      if (idx.empty()) throw MissingDomainError(std::string("probe: no ") + splits[s] + " images for " +
                                                to_string(kAllDomains[d]));
      // Evenly spaced subset so every identity range is represented.
      std::vector<int> pick;
      const std::size_t take = std::min(idx.size(), static_cast<std::size_t>(cfg.max_images));
      for (std::size_t k = 0; k < take; ++k) pick.push_back(idx[k * idx.size() / take]);
      for (int i : pick) {
        const Image img = at_size(data.item(i).pixels, size);
        const FusedLatent lat = fused_latent(state.base, *state.bank, *state.fusion, ag::constant(to_tensor(img)));
        const Tensor& z = lat.fused->value;
        const int dim = z.dim(1), hw = z.dim(2) * z.dim(3);
        for (int t = 0; t < hw; ++t) {
          std::vector<double> v(static_cast<std::size_t>(dim));
          for (int c = 0; c < dim; ++c) v[static_cast<std::size_t>(c)] = z[static_cast<std::size_t>(c) * hw + t];
          xs[s].push_back(std::move(v));
          ys[s].push_back(static_cast<int>(d));
        }
      }
    }
  }
  const ProbeResult p = linear_probe(xs[0], ys[0], xs[1], ys[1], static_cast<int>(kAllDomains.size()), cfg);
  MetricReport r;
  r.kind = "probe";
  r.meta = {{"checkpoint", describe_state(state)}, {"probe", cfg.to_json()}, {"features", "fused latent cells"}};
  r.body = {{"train_accuracy", p.train_accuracy},
            {"test_accuracy", p.test_accuracy},
            {"classes", p.classes},
            {"chance", 1.0 / p.classes},
            {"train_samples", p.train_samples},
            {"test_samples", p.test_samples}};
  return r;
}

}  // namespace idref
