// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "idref/digest.hpp"
#include "idref/optim.hpp"
#include "idref/vqcore.hpp"
#include "support/gradcheck.hpp"
#include "support/tempdir.hpp"

using namespace idref;
namespace ag = idref::nn;
using idref::testing::numeric_grad;
using idref::testing::random_tensor;
using idref::testing::relative_error;

namespace {

/// Exhaustive scan in the obvious order; the reference for nearest_codes.
std::vector<int> brute_force_codes(const Tensor& z, const Tensor& cb) {
  const int batch = z.dim(0), d = z.dim(1), hw = z.dim(2) * z.dim(3), n = cb.dim(0);
  std::vector<int> out;
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < hw; ++t) {
      std::vector<double> dist(static_cast<std::size_t>(n), 0.0);
      for (int k = 0; k < n; ++k)
        for (int c = 0; c < d; ++c) {
          const double diff = static_cast<double>(z[(static_cast<std::size_t>(b) * d + c) * hw + t]) -
                              cb[static_cast<std::size_t>(k) * d + c];
          dist[static_cast<std::size_t>(k)] += diff * diff;
        }
      int best = 0;
      for (int k = 1; k < n; ++k)
        if (dist[static_cast<std::size_t>(k)] < dist[static_cast<std::size_t>(best)]) best = k;
      out.push_back(best);
    }
  return out;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

VqConfig tiny_config() {
  VqConfig cfg;
  cfg.image_size = 32;
  cfg.latent_dim = 8;
  cfg.codebook_size = 16;
  cfg.channels = {4, 8, 8, 8};
  cfg.encoder_blocks = {0, 1, 0, 1};
  cfg.decoder_blocks = {0, 0, 1, 1};
  cfg.groups = 2;
  return cfg;
}

}  // namespace

TEST_CASE("encode maps 64x64 to an 8x8x64 latent deterministically") {
  const ModelBundle m = ModelBundle::create(VqConfig{}, 1);
  Rng rng(3);
  const Var x = ag::constant(random_tensor({2, 3, 64, 64}, rng, 0.0f, 1.0f));
  const Var z1 = m.encode(x);
  const Var z2 = m.encode(x);
  CHECK(z1->value.shape() == ag::Shape{2, 64, 8, 8});
  CHECK(z1->value.storage() == z2->value.storage());
  CHECK_THROWS_AS(m.encode(ag::constant(Tensor({1, 3, 32, 32}))), ag::ShapeError);
}

TEST_CASE("a five-stage configuration compresses 512 to 16") {
  VqConfig cfg;
  cfg.image_size = 512;
  cfg.latent_dim = 256;
  cfg.codebook_size = 1024;
  cfg.channels = {2, 2, 4, 4, 8, 8};
  cfg.encoder_blocks = {0, 0, 0, 0, 0, 0};
  cfg.decoder_blocks = {0, 0, 0, 0, 0, 0};
  cfg.groups = 2;
  CHECK(cfg.ratio() == 32);
  CHECK(cfg.tap_sizes() == std::vector<int>{16, 32, 64, 128, 256});
  ag::NoGradGuard guard;
  const ModelBundle m = ModelBundle::create(cfg, 2);
  const Var z = m.encode(ag::constant(Tensor({1, 3, 512, 512}, 0.5f)));
  CHECK(z->value.shape() == ag::Shape{1, 256, 16, 16});
}

TEST_CASE("decode returns a squashed image and small-to-large taps") {
  const ModelBundle m = ModelBundle::create(VqConfig{}, 4);
  Rng rng(5);
  const auto out = m.decode(ag::constant(random_tensor({2, 64, 8, 8}, rng, -3.0f, 3.0f)));
  CHECK(out.image->value.shape() == ag::Shape{2, 3, 64, 64});
  for (float v : out.image->value.values()) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
  REQUIRE(out.taps.size() == 3);
  const std::vector<int> sizes{8, 16, 32};
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(out.taps[i]->value.dim(2) == sizes[i]);
    CHECK(out.taps[i]->value.dim(1) == m.decoder.tap_channels()[i]);
  }
  CHECK_THROWS_AS(m.decode(ag::constant(Tensor({1, 32, 8, 8}))), ag::ShapeError);
}

TEST_CASE("decoder hook sees every stage and can alter the output") {
  const ModelBundle m = ModelBundle::create(VqConfig{}, 4);
  const Var zq = ag::constant(Tensor({1, 64, 8, 8}, 0.1f));
  std::vector<std::pair<int, int>> seen;
  const auto plain = m.decode(zq);
  const auto hooked = m.decode(zq, [&](int stage, const Var& tap, const Var& up) {
    seen.emplace_back(tap->value.dim(2), up->value.dim(2));
    CHECK(up->value.dim(1) == m.decoder.stage_channels()[static_cast<std::size_t>(stage)]);
    return up;
  });
  CHECK(seen == std::vector<std::pair<int, int>>{{8, 16}, {16, 32}, {32, 64}});
  CHECK(plain.image->value.storage() == hooked.image->value.storage());
}

TEST_CASE("quantize picks the nearest code with lowest-index ties") {
  SUBCASE("exact code") {
    Rng rng(7);
    const Tensor cb = random_tensor({10, 4}, rng);
    Tensor z({1, 4, 1, 1});
    for (int c = 0; c < 4; ++c) z[static_cast<std::size_t>(c)] = cb[5 * 4 + static_cast<std::size_t>(c)];
    const Quantized q = quantize(ag::constant(z), ag::constant(cb));
    CHECK(q.indices == std::vector<int>{5});
    CHECK(q.values->value.storage() == z.storage());
  }
  SUBCASE("two codes") {
    const Tensor cb({2, 2}, {0.0f, 0.0f, 1.0f, 1.0f});
    const Tensor z({1, 2, 1, 1}, {0.2f, 0.1f});
    CHECK(nearest_codes(z, cb) == std::vector<int>{0});
  }
  SUBCASE("ties") {
    const Tensor cb({4, 2}, {1.0f, 0.0f, 0.0f, 1.0f, -1.0f, 0.0f, 1.0f, 0.0f});
    const Tensor z({1, 2, 1, 2}, {0.0f, 1.0f, 0.0f, 0.0f});  // cells (0,0) and (1,0)
    // (0,0) is equidistant from all four codes; (1,0) duplicates codes 0 and 3.
    CHECK(nearest_codes(z, cb) == std::vector<int>{0, 0});
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(nearest_codes(Tensor({1, 3, 2, 2}), Tensor({4, 2})), ag::ShapeError);
  }
}

TEST_CASE("quantize matches the exhaustive oracle on random instances") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = random_tensor({1, 4, 10, 10}, rng);
    Tensor cb = random_tensor({16, 4}, rng);
    // Plant duplicates so tie-breaking is exercised.
    for (int c = 0; c < 4; ++c) cb[12 * 4 + static_cast<std::size_t>(c)] = cb[3 * 4 + static_cast<std::size_t>(c)];
    const auto fast = nearest_codes(z, cb);
    CHECK(fast == brute_force_codes(z, cb));
    const Quantized q = quantize(ag::constant(z), ag::constant(cb));
    CHECK(nearest_codes(q.values->value, cb) == fast);  // idempotence
    for (int t = 0; t < 100; ++t) {
      const int chosen = fast[static_cast<std::size_t>(t)];
      CHECK(chosen != 12);
      auto dist = [&](int k) {
        double s = 0.0;
        for (int c = 0; c < 4; ++c) {
          const double diff = z[static_cast<std::size_t>(c) * 100 + static_cast<std::size_t>(t)] -
                              cb[static_cast<std::size_t>(k) * 4 + static_cast<std::size_t>(c)];
          s += diff * diff;
        }
        return s;
      };
      for (int k = 0; k < 16; ++k) REQUIRE(dist(chosen) <= dist(k));
    }
  }
}

TEST_CASE("straight-through forwards z_q and copies gradients to z") {
  Rng rng(13);
  const Var z = ag::parameter(random_tensor({1, 8, 8, 8}, rng));
  const Var cb = ag::parameter(random_tensor({32, 8}, rng));
  const Quantized q = quantize(z, cb);
  const Var st = ag::straight_through(z, q.values);
  CHECK(st->value.storage() == q.values->value.storage());
  ag::backward(ag::sum(st));
  for (float g : z->grad.values()) REQUIRE(g == 1.0f);
  CHECK_FALSE(cb->has_grad());
}

TEST_CASE("straight-through gradient matches finite differences of the downstream net") {
  Rng rng(17);
  ag::ParamSet net;
  const auto c1 = ag::Conv2d::create(net, "c1", 8, 8, 3, 1, rng);
  const auto c2 = ag::Conv2d::create(net, "c2", 8, 3, 3, 1, rng);
  net.set_trainable(false);
  auto head = [&](const Var& v) { return ag::mean(ag::square(c2(ag::silu(c1(v))))); };

  const Var z = ag::parameter(random_tensor({1, 8, 8, 8}, rng));
  const Var cb = ag::constant(random_tensor({64, 8}, rng));
  const Quantized q = quantize(z, cb);
  ag::backward(head(ag::straight_through(z, q.values)));

  // Oracle: differentiate the downstream net at z_q directly, indices frozen.
  const Var zq = ag::parameter(q.values->value);
  const Tensor fd = numeric_grad(zq, [&] {
    ag::NoGradGuard guard;
    return static_cast<double>(head(zq)->value[0]);
  });
  CHECK(relative_error(z->grad, fd) < 1e-3);
}

TEST_CASE("codebook_stats counts usage and perplexity") {
  const std::vector<int> same(64, 3);
  const auto one = codebook_stats(same, 8);
  CHECK(one.perplexity == doctest::Approx(1.0));
  CHECK(one.used == 1);
  std::vector<int> uniform;
  for (int i = 0; i < 80; ++i) uniform.push_back(i % 8);
  CHECK(codebook_stats(uniform, 8).perplexity == doctest::Approx(8.0));
  Rng rng(1);
  std::vector<int> random_idx;
  for (int i = 0; i < 2 * 8 * 8; ++i) random_idx.push_back(static_cast<int>(rng() % 16));
  const auto s = codebook_stats(random_idx, 16);
  long total = 0;
  for (long c : s.histogram) total += c;
  CHECK(total == 2 * 8 * 8);
  CHECK(s.perplexity >= 1.0);
  CHECK(s.perplexity <= 16.0);
  CHECK_THROWS(codebook_stats(std::vector<int>{}, 4));
}

TEST_CASE("codebook initialisation has no duplicate codes") {
  const ModelBundle m = ModelBundle::create(VqConfig{}, 9);
  const Tensor& cb = m.shared.codes->value;
  std::set<std::vector<float>> rows;
  for (int k = 0; k < cb.dim(0); ++k) {
    rows.insert(std::vector<float>(cb.data() + static_cast<std::size_t>(k) * cb.dim(1),
                                   cb.data() + static_cast<std::size_t>(k + 1) * cb.dim(1)));
  }
  CHECK(rows.size() == static_cast<std::size_t>(cb.dim(0)));
}

TEST_CASE("model bundle serialisation round-trips byte for byte") {
  idref::testing::TempDir tmp("vq");
  const ModelBundle a = ModelBundle::create(tiny_config(), 21);
  Checkpoint ck;
  a.store(ck.arrays);
  ck.config = {{"vq", a.config.to_json()}};
  save_checkpoint(tmp / "one", ck);

  const Checkpoint loaded = load_checkpoint(tmp / "one");
  ModelBundle b = ModelBundle::create(VqConfig::from_json(loaded.config.at("vq")), 99);
  b.load(loaded.arrays);
  CHECK(b.encoder_params.digest() == a.encoder_params.digest());
  Checkpoint again;
  b.store(again.arrays);
  again.config = loaded.config;
  save_checkpoint(tmp / "two", again);
  CHECK(read_bytes(tmp / "one/manifest.json") == read_bytes(tmp / "two/manifest.json"));
  CHECK(read_bytes(tmp / "one/params.bin") == read_bytes(tmp / "two/params.bin"));

  Rng rng(2);
  const Var x = ag::constant(random_tensor({1, 3, 32, 32}, rng, 0.0f, 1.0f));
  CHECK(a.reconstruct(x).image->value.storage() == b.reconstruct(x).image->value.storage());
}

TEST_CASE("corrupted checkpoints are rejected") {
  idref::testing::TempDir tmp("vqbad");
  const ModelBundle a = ModelBundle::create(tiny_config(), 21);
  Checkpoint ck;
  a.store(ck.arrays);
  save_checkpoint(tmp / "c", ck);
  {
    std::fstream f(tmp / "c/params.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint(tmp / "c"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(tmp / "missing"), CheckpointError);
  TensorMap partial;
  CHECK_THROWS_AS(ModelBundle::create(tiny_config(), 1).load(partial), CheckpointError);
}

TEST_CASE("reconstruction trains end to end on a tiny model") {
  ModelBundle m = ModelBundle::create(tiny_config(), 5);
  Rng rng(8);
  const Var x = ag::constant(random_tensor({2, 3, 32, 32}, rng, 0.2f, 0.8f));
  std::vector<Var> params = m.encoder_params.vars();
  for (const auto& v : m.decoder_params.vars()) params.push_back(v);
  ag::Adam opt(params, {.lr = 3e-3f});
  double first = 0.0, last = 0.0;
  for (int it = 0; it < 30; ++it) {
    opt.zero_grad();
    const Var loss = ag::l1_mean(m.reconstruct(x).image, x);
    ag::backward(loss);
    opt.step();
    if (it == 0) first = loss->value[0];
    last = loss->value[0];
  }
  CHECK(last < first);
}
