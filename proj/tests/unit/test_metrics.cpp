// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "idref/metrics.hpp"
#include "support/tempdir.hpp"

using namespace idref;
namespace ag = idref::nn;
using idref::testing::TempDir;

namespace {

Image grey_pattern(int h, int w, const std::function<double(int, int)>& f) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(f(y, x));
  return img;
}

Image noise_image(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Image img(h, w);
  for (auto& p : img.pixels) p = d(rng);
  return img;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.vq.image_size = 32;
  m.vq.latent_dim = 8;
  m.vq.codebook_size = 16;
  m.vq.channels = {4, 8, 8, 8};
  m.vq.encoder_blocks = {0, 1, 0, 1};
  m.vq.decoder_blocks = {0, 0, 1, 1};
  m.vq.groups = 2;
  m.fusion.width = 16;
  m.fusion.heads = 2;
  m.fusion.blocks = 1;
  m.embedder.input_size = 32;
  m.embedder.embed_dim = 16;
  m.embedder.widths = {8, 8, 16};
  m.swapper = SwapperConfig::defaults_for(m.vq, 16);
  m.seed = 4;
  return m;
}

struct Pipeline {
  TempDir dir{"metrics"};
  Dataset data;
  ModelState state = ModelState::create(tiny_model());
  std::optional<ModelState> joint;
  Pipeline() {
    DatagenConfig dc;
    dc.identities = 6;
    dc.image_size = 32;
    dc.split = 0.67;
    dc.reflectance_ratio = 0.67;
    dc.seed = 8;
    data = Dataset::from_manifest(build_dataset(dc, dir / "data"));
    for (Stage s : kAllStages) {
      TrainConfig c = TrainConfig::defaults(s);
      c.iterations = 2;
      c.batch_size = 2;
      train(c, data, state, dir / to_string(s));
      if (s == Stage::stage1) joint = ModelState::load(dir / "stage1" / "final");
    }
  }
};

}  // namespace

TEST_CASE("psnr analytic values") {
  const Image a(8, 8, 0.5f);
  CHECK(psnr(a, a) == kPsnrCap);
  const Image b(8, 8, 0.6f);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK_THROWS_AS(psnr(a, Image(8, 9)), MetricsError);
}

TEST_CASE("psnr matches a direct recomputation and falls with noise") {
  std::mt19937_64 rng(1);
  const Image a = noise_image(rng, 16, 12), b = noise_image(rng, 16, 12);
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) se += std::pow(double(a.pixels[i]) - b.pixels[i], 2);
  CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(a.pixels.size() / se)).epsilon(1e-12));

  double last = kPsnrCap + 1.0;
  for (double sigma : {0.01, 0.03, 0.1, 0.3}) {
    std::mt19937_64 nrng(7);
    std::normal_distribution<double> n(0.0, sigma);
    Image noisy = a;
    for (auto& p : noisy.pixels) p = static_cast<float>(p + n(nrng));
    const double v = psnr(a, noisy);
    CHECK(v < last);
    last = v;
  }
}

TEST_CASE("ssim matches reference values") {
  const auto a = grey_pattern(24, 20, [](int y, int x) { return 0.5 + 0.5 * std::sin(0.7 * x) * std::cos(0.4 * y); });
  Image inv = a;
  for (auto& p : inv.pixels) p = 1.0f - p;
  const auto pert = grey_pattern(24, 20, [&](int y, int x) {
    return std::clamp(static_cast<double>(a.at(y, x, 0)) + 0.1 * std::cos(1.3 * x + 0.2 * y), 0.0, 1.0);
  });
  // Frozen from skimage.metrics.structural_similarity(win_size=7, data_range=1,
  // gaussian_weights=False, use_sample_covariance=True, K1=0.01, K2=0.03).
  CHECK(ssim(a, inv) == doctest::Approx(-0.9689947540081105).epsilon(1e-6));
  CHECK(ssim(a, pert) == doctest::Approx(0.9601877101113603).epsilon(1e-6));
  CHECK(ssim(a, inv) < 0.2);
  CHECK(ssim(a, a) == 1.0);
}

TEST_CASE("ssim is symmetric and bounded") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 10; ++t) {
    const Image a = noise_image(rng, 12, 15), b = noise_image(rng, 12, 15);
    const double v = ssim(a, b);
    CHECK(v == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(ssim(Image(5, 5), Image(5, 5)), MetricsError);
  CHECK_THROWS_AS(ssim(Image(8, 8), Image(9, 8)), MetricsError);
}

TEST_CASE("identity similarity with the oracle embedder") {
  TempDir dir("idsim");
  DatagenConfig dc;
  dc.identities = 4;
  dc.image_size = 32;
  const DatasetManifest m = build_dataset(dc, dir / "data");
  const Dataset data = Dataset::from_manifest(m);
  const EmbedFn oracle = oracle_embedder(m, 32);
  const auto& i0 = data.item(data.find(m.identities[0].params.id, Domain::rgb, View::frontal));
  const auto& i1 = data.item(data.find(m.identities[1].params.id, Domain::rgb, View::frontal));
  const DomainImage a{i0.pixels, Domain::rgb, View::frontal, i0.identity};
  const DomainImage b{i1.pixels, Domain::rgb, View::frontal, i1.identity};
  const auto ea = oracle_embedding(m.identities[0].params, 32), eb = oracle_embedding(m.identities[1].params, 32);
  double dot = 0.0;
  for (std::size_t k = 0; k < ea.size(); ++k) dot += static_cast<double>(ea[k]) * eb[k];
  CHECK(id_similarity(a, b, oracle) == doctest::Approx(dot).epsilon(1e-6));
  CHECK(id_similarity(a, a, oracle) == doctest::Approx(1.0).epsilon(1e-6));
  DomainImage brighter = a;
  for (auto& p : brighter.pixels.pixels) p *= 0.6f;
  CHECK(id_similarity(brighter, b, oracle) == id_similarity(a, b, oracle));
  CHECK_THROWS_AS(id_similarity({i0.pixels, Domain::rgb}, b, oracle), MetricsError);

  ag::ParamSet ps;
  Rng rng(3);
  EmbedderConfig ec;
  ec.input_size = 32;
  ec.embed_dim = 16;
  ec.widths = {8, 8, 16};
  const Embedder e = Embedder::create(ps, ec, rng);
  CHECK(id_similarity(a, a, e) == doctest::Approx(1.0).epsilon(1e-5));
  const double c = id_similarity(a, b, e);
  CHECK(c >= -1.0);
  CHECK(c <= 1.0);
}

TEST_CASE("linear probe controls") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::uniform_int_distribution<int> label(0, 4);
  SUBCASE("one-hot features are separable") {
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (int i = 0; i < 100; ++i) {
      y.push_back(i % 5);
      std::vector<double> v(5, 0.0);
      v[static_cast<std::size_t>(i % 5)] = 1.0;
      x.push_back(v);
    }
    const ProbeResult r = linear_probe(x, y, x, y, 5);
    CHECK(r.train_accuracy == 1.0);
    CHECK(r.test_accuracy == 1.0);
  }
  SUBCASE("random features sit at chance") {
    std::vector<std::vector<double>> xtr, xte;
    std::vector<int> ytr, yte;
    for (int i = 0; i < 1000; ++i) {
      std::vector<double> v(8);
      for (auto& e : v) e = n(rng);
      (i < 500 ? xtr : xte).push_back(v);
      (i < 500 ? ytr : yte).push_back(label(rng));
    }
    const ProbeResult r = linear_probe(xtr, ytr, xte, yte, 5);
    CHECK(std::abs(r.test_accuracy - 0.2) < 0.1);
  }
}

TEST_CASE("report schema validation") {
  MetricReport r;
  r.kind = "metrics";
  r.pairs.push_back({"x", 30.0, 0.9, 0.01, 0.5});
  CHECK(validate_report(r.to_json()).empty());
  CHECK(r.to_json()["columns"]["perceptual_proxy"].get<std::string>().rfind(kPerceptualLabel, 0) == 0);
  auto j = r.to_json();
  j["pairs"][0]["ssim"] = 1.5;
  CHECK(!validate_report(j).empty());
  j = r.to_json();
  j["schema"] = "other/0";
  CHECK(!validate_report(j).empty());
  MetricReport abl;
  abl.kind = "ablation";
  CHECK(!validate_report(abl.to_json()).empty());
}

TEST_CASE("evaluation reports on a small trained pipeline") {
  Pipeline p;
  const TemplateLibrary lib = TemplateLibrary::build(p.data, "train", *p.state.embedder);

  SUBCASE("identical arms give identical columns") {
    const MetricReport r = ablate_codebooks(p.state, p.state, p.data, nullptr);
    CHECK(validate_report(r.to_json()).empty());
    for (Domain d : kReflectanceDomains) {
      CHECK(r.body["domains"][to_string(d)]["joint"] == r.body["domains"][to_string(d)]["multi"]);
    }
    CHECK(r.body["swap"].is_null());
  }
  SUBCASE("joint against multi-domain arms") {
    const MetricReport r = ablate_codebooks(*p.joint, p.state, p.data, &lib);
    const auto j = r.to_json();
    INFO(j.dump(2));
    CHECK(validate_report(j).empty());
    CHECK(j["swap"].is_object());
    CHECK(j["mean"]["gain"].get<double>() ==
          doctest::Approx(j["mean"]["multi"].get<double>() - j["mean"]["joint"].get<double>()));
    CHECK(ablate_codebooks(*p.joint, p.state, p.data, &lib).to_json() == j);
  }
  SUBCASE("metrics and probe") {
    const MetricReport m = evaluate_model(p.state, p.data, &lib);
    CHECK(validate_report(m.to_json()).empty());
    CHECK(!m.pairs.empty());
    CHECK(m.body["identity"]["faces"].size() > 0);
    ProbeConfig pc;
    pc.iterations = 50;
    pc.max_images = 4;
    const MetricReport pr = latent_separability(p.state, p.data, pc);
    CHECK(validate_report(pr.to_json()).empty());
    CHECK_THROWS_AS(latent_separability(*p.joint, p.data, pc), PrerequisiteError);
  }
}
