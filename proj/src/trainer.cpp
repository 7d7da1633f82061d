// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "idref/optim.hpp"
#include "idref/random.hpp"

namespace idref {

namespace fs = std::filesystem;
namespace ag = idref::nn;
using nlohmann::json;

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::stage1: return "stage1";
    case Stage::domains: return "domains";
    case Stage::fusion: return "fusion";
    case Stage::embedder: return "embedder";
    case Stage::swapper: return "swapper";
  }
  throw UnknownStageError("unknown stage value " + std::to_string(static_cast<int>(stage)));
}

Stage parse_stage(const std::string& s) {
  for (Stage st : kAllStages)
    if (to_string(st) == s) return st;
  throw UnknownStageError("unknown stage '" + s + "' (expected stage1, domains, fusion, embedder or swapper)");
}

// ---------------------------------------------------------------------------
// Configuration

ModelConfig::ModelConfig() : swapper(SwapperConfig::defaults_for(vq, embedder.embed_dim)) {}

void ModelConfig::validate() const {
  vq.validate();
  if (embedder.input_size != vq.image_size) {
    throw std::invalid_argument("model: embedder input size " + std::to_string(embedder.input_size) +
                                " must equal the image size " + std::to_string(vq.image_size));
  }
  if (swapper.embed_dim != embedder.embed_dim) {
    throw std::invalid_argument("model: swapper embed_dim must equal the embedder's");
  }
  const auto taps = vq.tap_sizes();
  for (int s : swapper.scales) {
    if (std::find(taps.begin(), taps.end(), s) == taps.end()) {
      throw SwapperError("model: swapper scale " + std::to_string(s) + " is not a decoder tap scale");
    }
  }
}

json ModelConfig::to_json() const {
  return {{"vq", vq.to_json()},
          {"fusion", fusion.to_json()},
          {"embedder", embedder.to_json()},
          {"swapper", swapper.to_json()},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  if (j.contains("vq")) c.vq = VqConfig::from_json(j.at("vq"));
  if (j.contains("fusion")) c.fusion = FusionConfig::from_json(j.at("fusion"));
  if (j.contains("embedder")) c.embedder = EmbedderConfig::from_json(j.at("embedder"));
  json sw = j.value("swapper", json::object());
  if (!sw.contains("embed_dim")) sw["embed_dim"] = c.embedder.embed_dim;
  c.swapper = SwapperConfig::from_json(sw, c.vq);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

TrainConfig TrainConfig::defaults(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  switch (stage) {
    case Stage::stage1:
      c.lr = 8e-4f;
      c.iterations = 1500;
      c.adv_start = 1000;
      break;
    case Stage::domains:
      c.lr = 1e-3f;
      c.iterations = 1000;
      break;
    case Stage::fusion:
      c.lr = 5e-4f;
      c.iterations = 600;
      break;
    case Stage::embedder:
      c.lr = 1e-3f;
      c.iterations = 800;
      c.batch_size = 16;
      break;
    case Stage::swapper:
      c.lr = 7e-4f;
      c.iterations = 1000;
      break;
  }
  return c;
}

void TrainConfig::validate() const {
  if (batch_size <= 0) throw std::invalid_argument("train: batch_size must be positive");
  if (!(lr > 0.0f) || !(disc_lr > 0.0f)) throw std::invalid_argument("train: learning rates must be positive");
  if (iterations < 0) throw std::invalid_argument("train: iterations must be non-negative");
  if (log_every <= 0 || checkpoint_every < 0 || keep <= 0) {
    throw std::invalid_argument("train: log_every and keep must be positive, checkpoint_every non-negative");
  }
  if (restart_every < 0) throw std::invalid_argument("train: restart_every must be non-negative");
  if (!(rgb_per_reflectance >= 0.0)) throw std::invalid_argument("train: rgb_per_reflectance must be >= 0");
  if (!(same_identity_rate >= 0.0 && same_identity_rate <= 1.0)) {
    throw std::invalid_argument("train: same_identity_rate must lie in [0,1]");
  }
}

json TrainConfig::to_json() const {
  return {{"stage", to_string(stage)},
          {"manifest", manifest.string()},
          {"batch_size", batch_size},
          {"lr", lr},
          {"iterations", iterations},
          {"stage1_weights", stage1_weights.to_json()},
          {"stage2_weights", stage2_weights.to_json()},
          {"seed", seed},
          {"log_every", log_every},
          {"checkpoint_every", checkpoint_every},
          {"keep", keep},
          {"device", device},
          {"adv_start", adv_start},
          {"rgb_per_reflectance", rgb_per_reflectance},
          {"disc_lr", disc_lr},
          {"restart_every", restart_every},
          {"restart_until", restart_until},
          {"same_identity_rate", same_identity_rate}};
}

TrainConfig TrainConfig::from_json(const json& j, Stage stage) {
  TrainConfig c = defaults(stage);
  if (j.contains("stage") && parse_stage(j.at("stage").get<std::string>()) != stage) {
    throw std::invalid_argument("train: config is for stage " + j.at("stage").get<std::string>());
  }
  c.manifest = j.value("manifest", c.manifest.string());
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.iterations = j.value("iterations", c.iterations);
  if (j.contains("stage1_weights")) c.stage1_weights = Stage1Weights::from_json(j.at("stage1_weights"));
  if (j.contains("stage2_weights")) c.stage2_weights = Stage2Weights::from_json(j.at("stage2_weights"));
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.keep = j.value("keep", c.keep);
  c.device = j.value("device", c.device);
  c.adv_start = j.value("adv_start", c.adv_start);
  c.rgb_per_reflectance = j.value("rgb_per_reflectance", c.rgb_per_reflectance);
  c.disc_lr = j.value("disc_lr", c.disc_lr);
  c.restart_every = j.value("restart_every", c.restart_every);
  c.restart_until = j.value("restart_until", c.restart_until);
  c.same_identity_rate = j.value("same_identity_rate", c.same_identity_rate);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Model state

namespace {

std::uint64_t component_seed(const ModelConfig& cfg, std::uint64_t salt) { return mix_seed(cfg.seed, salt); }

}  // namespace

ModelState ModelState::create(const ModelConfig& cfg) {
  cfg.validate();
  ModelState s;
  s.config = cfg;
  s.base = ModelBundle::create(cfg.vq, cfg.seed);
  Rng rng(component_seed(cfg, 0xd15c));
  s.disc = PatchDiscriminator::create(s.disc_params, "", 3, rng);
  return s;
}

bool ModelState::has(Stage stage) const { return std::find(stages.begin(), stages.end(), stage) != stages.end(); }

void ModelState::add_bank() {
  if (!bank) bank = CodebookBank::from_shared(base.shared);
}

void ModelState::add_fusion() {
  if (fusion) return;
  add_bank();
  Rng rng(component_seed(config, 0xf05e));
  fusion = FusionNet::create(fusion_params, config.fusion, config.vq.latent_dim, config.vq.latent_size(), bank->size(),
                             rng);
}

void ModelState::add_embedder(int classes) {
  if (embedder) return;
  Rng rng(component_seed(config, 0xe3bd));
  embedder = Embedder::create(embedder_params, config.embedder, rng);
  classifier_params.add("weight", ag::randn({classes, config.embedder.embed_dim}, 1.0f, rng));
}

void ModelState::add_swapper() {
  if (swapper) return;
  Rng rng(component_seed(config, 0x5a9e));
  swapper = Swapper::create(swapper_params, config.swapper, config.vq, base.decoder, rng);
  const auto widths = pyramid.widths();
  for (std::size_t l = 0; l < widths.size(); ++l) {
    pyramid_discs.push_back(
        FeatureDiscriminator::create(pyramid_disc_params, "level" + std::to_string(l) + ".", widths[l], rng));
  }
}

SwapModels ModelState::swap_models() const {
  return {&base, bank ? &*bank : nullptr, fusion ? &*fusion : nullptr, embedder ? &*embedder : nullptr,
          swapper ? &*swapper : nullptr};
}

std::map<std::string, const ag::ParamSet*> ModelState::groups() const {
  std::map<std::string, const ag::ParamSet*> g{{"encoder", &base.encoder_params},
                                               {"decoder", &base.decoder_params},
                                               {"codebook", &base.codebook_params},
                                               {"disc", &disc_params}};
  if (bank) g["bank"] = &bank->params;
  if (fusion) g["fusion"] = &fusion_params;
  if (embedder) {
    g["embedder"] = &embedder_params;
    g["classifier"] = &classifier_params;
  }
  if (swapper) {
    g["swapper"] = &swapper_params;
    g["pyramid_disc"] = &pyramid_disc_params;
  }
  return g;
}

std::map<std::string, std::string> ModelState::digests() const {
  std::map<std::string, std::string> d;
  for (const auto& [name, ps] : groups()) d[name] = ps->digest();
  return d;
}

Checkpoint ModelState::to_checkpoint() const {
  Checkpoint ck;
  for (const auto& [name, ps] : groups()) store_params(ck.arrays, *ps, name + ".");
  json st = json::array();
  for (Stage s : stages) st.push_back(to_string(s));
  ck.config = {{"format", "idref-model"}, {"model", config.to_json()}, {"stages", st}};
  return ck;
}

void ModelState::save(const fs::path& dir, const json& extra) const {
  Checkpoint ck = to_checkpoint();
  for (const auto& [k, v] : extra.items()) ck.config[k] = v;
  save_checkpoint(dir, ck);
}

ModelState ModelState::load(const fs::path& dir) {
  const Checkpoint ck = load_checkpoint(dir);
  if (ck.config.value("format", "") != "idref-model") {
    throw CheckpointError(dir.string() + " is not a model checkpoint");
  }
  ModelState s = create(ModelConfig::from_json(ck.config.at("model")));
  for (const auto& name : ck.config.at("stages")) s.stages.push_back(parse_stage(name.get<std::string>()));
  const auto present = [&](const std::string& prefix) {
    const auto it = ck.arrays.lower_bound(prefix);
    return it != ck.arrays.end() && it->first.compare(0, prefix.size(), prefix) == 0;
  };
  if (present("bank.")) s.add_bank();
  if (present("fusion.")) s.add_fusion();
  if (present("embedder.")) {
    const auto it = ck.arrays.find("classifier.weight");
    if (it == ck.arrays.end()) throw CheckpointError(dir.string() + ": embedder without classifier");
    s.add_embedder(it->second.dim(0));
  }
  if (present("swapper.")) s.add_swapper();
  for (const auto& [name, ps] : s.groups()) load_params(ck.arrays, const_cast<ag::ParamSet&>(*ps), name + ".");
  return s;
}

std::vector<std::string> trainable_groups(Stage stage) {
  switch (stage) {
    case Stage::stage1: return {"encoder", "decoder", "codebook", "disc"};
    case Stage::domains: return {"bank"};
    case Stage::fusion: return {"fusion"};
    case Stage::embedder: return {"embedder", "classifier"};
    case Stage::swapper: return {"swapper", "pyramid_disc"};
  }
  return {};
}

Domain training_domain(CodebookTag tag) {
  switch (tag) {
    case CodebookTag::diffuse: return Domain::diffuse;
    case CodebookTag::specular: return Domain::specular;
    case CodebookTag::roughness: return Domain::roughness;
    case CodebookTag::normal: return Domain::normal;
    case CodebookTag::rgb_texture: return Domain::rgb;
    case CodebookTag::shared: break;
  }
  throw BankError("the shared book has no training domain");
}

// ---------------------------------------------------------------------------
// Training loop machinery

namespace {

using Metrics = std::map<std::string, double>;

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int pick(Rng& rng, std::size_t n) {
  return static_cast<int>(std::min<std::size_t>(n - 1, static_cast<std::size_t>(unit_uniform(rng) * n)));
}

template <typename T>
const T& pick_from(Rng& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(pick(rng, v.size()))];
}

double value_of(const Var& v) { return static_cast<double>(v->value[0]); }

/// Calls the test hook, then rejects non-finite totals before any update.
void screen_loss(Var& loss, int it, const TrainHooks& hooks) {
  if (hooks.on_loss) hooks.on_loss(it, loss);
  if (!std::isfinite(value_of(loss))) {
    throw NonFiniteLoss("non-finite total loss " + std::to_string(value_of(loss)) + " at iteration " +
                        std::to_string(it));
  }
}

void set_trainable(ModelState& state, Stage stage) {
  const auto train = trainable_groups(stage);
  for (const auto& [name, ps] : state.groups()) {
    const bool on = std::find(train.begin(), train.end(), name) != train.end();
    const_cast<ag::ParamSet*>(ps)->set_trainable(on);
  }
}

std::vector<Var> params_of(const ModelState& state, std::initializer_list<const char*> names) {
  std::vector<Var> out;
  const auto g = state.groups();
  for (const char* n : names) {
    const auto v = g.at(n)->vars();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

std::vector<int> eval_indices(const std::vector<int>& pool, int count, std::uint64_t seed) {
  std::vector<int> p = pool;
  Rng rng(mix_seed(seed, 0xe7a1));
  shuffle(std::span<int>(p), rng);
  p.resize(std::min<std::size_t>(p.size(), static_cast<std::size_t>(count)));
  return p;
}

std::string step_name(int it) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06d", it);
  return buf;
}

/// Usage counts since the last restart of one codebook.
struct DeadCodeMonitor {
  const TrainConfig& cfg;
  std::vector<long> usage;

  DeadCodeMonitor(const TrainConfig& c, int codes) : cfg(c), usage(static_cast<std::size_t>(codes), 0) {}
  void record(std::span<const int> indices) {
    for (int i : indices) ++usage[static_cast<std::size_t>(i)];
  }
  bool due(int it) const {
    return cfg.restart_every > 0 && it % cfg.restart_every == 0 && it <= cfg.restart_until * cfg.iterations;
  }
  int restart(const Var& codes, const Tensor& z, Rng& rng) {
    const int n = restart_dead_codes(codes->value, usage, z, rng);
    std::fill(usage.begin(), usage.end(), 0);
    return n;
  }
};

struct StageLoop {
  const TrainConfig& cfg;
  ModelState& state;
  fs::path out;
  std::function<Metrics(int)> step;
  std::function<double()> evaluate;

  TrainResult run() {
    TrainResult r;
    fs::create_directories(out);
    std::ofstream log(out / "log.jsonl", std::ios::trunc);
    std::ofstream timing(out / "timing.jsonl", std::ios::trunc);
    if (!log || !timing) throw std::runtime_error("cannot write training logs under " + out.string());

    const auto train_groups = trainable_groups(cfg.stage);
    std::map<std::string, std::string> frozen_before;
    for (const auto& [name, digest] : state.digests()) {
      if (std::find(train_groups.begin(), train_groups.end(), name) == train_groups.end()) frozen_before[name] = digest;
    }

    r.initial_eval = evaluate();
    std::vector<fs::path> rotation;
    const auto t0 = std::chrono::steady_clock::now();
    for (int it = 1; it <= cfg.iterations; ++it) {
      Metrics m;
      try {
        m = step(it);
        for (const auto& [k, v] : m) {
          if (!std::isfinite(v)) throw NonFiniteLoss("non-finite " + k + " at iteration " + std::to_string(it));
        }
      } catch (const NonFiniteLoss& e) {
        const fs::path last_good = out / "last_good";
        state.save(last_good, {{"aborted_at", it}, {"train", cfg.to_json()}});
        std::string msg = std::string(e.what()) + "; parameters before the step saved to " + last_good.string();
        if (!rotation.empty()) msg += "; last rotated checkpoint " + rotation.back().string();
        throw TrainingAborted(msg, last_good);
      }
      if (it == 1 || it % cfg.log_every == 0 || it == cfg.iterations) {
        json rec{{"stage", to_string(cfg.stage)}, {"iter", it}};
        for (const auto& [k, v] : m) rec[k] = v;
        log << rec.dump() << '\n';
        log.flush();
        r.log.push_back(rec);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        timing << json{{"iter", it}, {"seconds", secs}}.dump() << '\n';
        timing.flush();
      }
      if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) {
        const fs::path dir = out / step_name(it);
        state.save(dir, {{"iteration", it}, {"train", cfg.to_json()}});
        rotation.push_back(dir);
        while (static_cast<int>(rotation.size()) > cfg.keep) {
          fs::remove_all(rotation.front());
          rotation.erase(rotation.begin());
        }
      }
    }
    r.final_eval = evaluate();

    std::vector<std::string> changed;
    const auto after = state.digests();
    for (const auto& [name, digest] : frozen_before) {
      if (after.at(name) != digest) changed.push_back(name);
    }
    if (!changed.empty()) {
      std::string msg = to_string(cfg.stage) + " modified frozen parameters:";
      for (const auto& c : changed) msg += " " + c;
      throw FreezeViolation(msg);
    }
    r.frozen_digests = frozen_before;

    if (!state.has(cfg.stage)) state.stages.push_back(cfg.stage);
    r.checkpoint = out / "final";
    state.save(r.checkpoint, {{"iteration", cfg.iterations},
                              {"train", cfg.to_json()},
                              {"frozen", frozen_before},
                              {"eval", {{"initial", r.initial_eval}, {"final", r.final_eval}}}});
    return r;
  }
};

void require(const ModelState& state, Stage needed, Stage stage) {
  if (!state.has(needed)) {
    throw PrerequisiteError(to_string(stage) + " needs a checkpoint that completed " + to_string(needed));
  }
}

/// Fixed stack of items with their tensors cached.
struct Pool {
  std::vector<int> items;
  void require_nonempty(const std::string& what) const {
    if (items.empty()) throw MissingDomainError("no training images for " + what);
  }
};

Tensor stack_rows(const std::vector<Tensor>& rows, std::span<const int> pick_rows) {
  ag::Shape s = rows.front().shape();
  s[0] = static_cast<int>(pick_rows.size());
  Tensor out(s);
  const std::size_t per = rows.front().numel();
  for (std::size_t i = 0; i < pick_rows.size(); ++i) {
    const auto& r = rows[static_cast<std::size_t>(pick_rows[i])];
    std::copy(r.storage().begin(), r.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 1: autoencoder with the shared codebook.

TrainResult run_stage1(const TrainConfig& cfg, const Dataset& data, ModelState& state, const fs::path& out,
                       const TrainHooks& hooks) {
  const auto rgb = data.select("train", Domain::rgb);
  std::vector<int> refl;
  for (Domain d : kReflectanceDomains) {
    const auto s = data.select("train", d);
    refl.insert(refl.end(), s.begin(), s.end());
  }
  if (rgb.empty() && refl.empty()) throw DatasetError("stage1: the manifest has no training images");
  if (rgb.empty()) throw MissingDomainError("stage1: no rgb training images");
  if (refl.empty()) throw MissingDomainError("stage1: no reflectance training images");

  set_trainable(state, Stage::stage1);
  ag::Adam opt_g(params_of(state, {"encoder", "decoder", "codebook"}), {cfg.lr, 0.5f, 0.9f});
  ag::Adam opt_d(params_of(state, {"disc"}), {cfg.disc_lr, 0.5f, 0.9f});
  Rng rng(mix_seed(cfg.seed, 0x57a1));
  const double p_refl = 1.0 / (1.0 + cfg.rgb_per_reflectance);
  const auto& w = cfg.stage1_weights;
  const int n_codes = state.config.vq.codebook_size;

  DeadCodeMonitor monitor(cfg, n_codes);
  Rng restart_rng(mix_seed(cfg.seed, 0x7e57));
  Tensor last_z;

  auto objective = [&](const Var& x, bool adversarial, std::vector<int>* indices) {
    const Var z = state.base.encode(x);
    const Quantized q = quantize(z, state.base.shared.codes);
    if (indices) last_z = z->value;
    const auto out_img = state.base.decode(ag::straight_through(z, q.values)).image;
    Stage1Components c;
    c.photo = photo_loss(out_img, x);
    c.perceptual = perceptual_loss(out_img, x, state.perceptual);
    c.code = code_loss(z, q.values, w.beta).total;
    c.adversarial = adversarial ? adv_stage1(nullptr, state.disc(out_img), Side::generator) : ag::constant(Tensor({1}));
    if (indices) *indices = q.indices;
    return std::pair{c, out_img};
  };

  std::vector<int> eval_pool = rgb;
  eval_pool.insert(eval_pool.end(), refl.begin(), refl.end());
  const Tensor eval_x = data.batch(eval_indices(eval_pool, 16, cfg.seed));

  StageLoop loop{cfg, state, out, nullptr, nullptr};
  loop.evaluate = [&] {
    ag::NoGradGuard ng;
    auto [c, img] = objective(ag::constant(eval_x), false, nullptr);
    return value_of(stage1_total(c, w));
  };
  loop.step = [&](int it) {
    std::vector<int> idx;
    for (int b = 0; b < cfg.batch_size; ++b) {
      idx.push_back(unit_uniform(rng) < p_refl ? pick_from(rng, refl) : pick_from(rng, rgb));
    }
    const Var x = ag::constant(data.batch(idx));
    const bool adv = it > cfg.adv_start;
    std::vector<int> codes;
    auto [c, img] = objective(x, adv, &codes);
    Var total = stage1_total(c, w);
    screen_loss(total, it, hooks);
    opt_g.zero_grad();
    opt_d.zero_grad();
    ag::backward(total);
    opt_g.step();

    Metrics m{{"total", value_of(total)},
              {"photo", value_of(c.photo)},
              {"perceptual", value_of(c.perceptual)},
              {"adversarial", value_of(c.adversarial)},
              {"code", value_of(c.code)},
              {"perplexity", codebook_stats(codes, n_codes).perplexity}};
    monitor.record(codes);
    if (monitor.due(it)) m["restarted"] = monitor.restart(state.base.shared.codes, last_z, restart_rng);
    if (adv) {
      opt_d.zero_grad();
      Var d_loss = adv_stage1(state.disc(x), state.disc(ag::detach(img)), Side::discriminator);
      ag::backward(d_loss);
      opt_d.step();
      m["disc"] = value_of(d_loss);
    }
    return m;
  };
  return loop.run();
}

// ---------------------------------------------------------------------------
// Stage 2: per-domain codebook fine-tuning with a frozen autoencoder.

TrainResult run_domains(const TrainConfig& cfg, const Dataset& data, ModelState& state, const fs::path& out,
                        const TrainHooks& hooks) {
  require(state, Stage::stage1, Stage::domains);
  state.add_bank();
  set_trainable(state, Stage::domains);
  const CodebookBank& bank = *state.bank;

  // Frozen encoder: latents are computed once per training item.
  std::vector<std::vector<int>> pools(static_cast<std::size_t>(bank.size()));
  std::vector<std::string> missing;
  for (int k = 0; k < bank.size(); ++k) {
    const Domain d = training_domain(bank.books[static_cast<std::size_t>(k)].tag);
    pools[static_cast<std::size_t>(k)] = data.select("train", d);
    if (pools[static_cast<std::size_t>(k)].empty()) missing.push_back(to_string(d));
  }
  if (!missing.empty()) {
    std::string msg = "domains: no training images for domain(s):";
    for (const auto& m : missing) msg += " " + m;
    throw MissingDomainError(msg);
  }
  std::map<int, Tensor> latent;
  {
    ag::NoGradGuard ng;
    for (const auto& pool : pools)
      for (int i : pool)
        if (!latent.count(i)) latent[i] = state.base.encode(ag::constant(data.batch(std::span<const int>(&i, 1))))->value;
  }
  auto stack = [&](const std::vector<int>& idx) {
    std::vector<Tensor> rows;
    for (int i : idx) rows.push_back(latent.at(i));
    std::vector<int> order(idx.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    return stack_rows(rows, order);
  };

  const auto& w = cfg.stage1_weights;
  auto objective = [&](int k, const std::vector<int>& idx, std::vector<int>* codes) {
    const Var x = ag::constant(data.batch(idx));
    const Var z = ag::constant(stack(idx));
    const Quantized q = quantize(z, bank.books[static_cast<std::size_t>(k)].codes);
    const Var img = state.base.decode(q.values).image;
    const Var photo = photo_loss(img, x);
    const Var perc = perceptual_loss(img, x, state.perceptual);
    const Var code = code_loss(z, q.values, w.beta).total;
    if (codes) *codes = q.indices;
    const Var total = ag::add(ag::add(photo, ag::scale(perc, w.eta1)), ag::scale(code, w.eta3));
    return std::array<Var, 4>{total, photo, perc, code};
  };

  std::vector<std::vector<int>> eval_sets;
  for (int k = 0; k < bank.size(); ++k) {
    eval_sets.push_back(eval_indices(pools[static_cast<std::size_t>(k)], 8, mix_seed(cfg.seed, k)));
  }

  std::vector<DeadCodeMonitor> monitors;
  for (const auto& b : bank.books) monitors.emplace_back(cfg, b.size());
  Rng restart_rng(mix_seed(cfg.seed, 0x7e57));

  std::vector<ag::Adam> opts;
  for (const auto& b : bank.books) opts.emplace_back(std::vector<Var>{b.codes}, ag::AdamOptions{cfg.lr});
  Rng rng(mix_seed(cfg.seed, 0xd0d0));
  const int per_book = std::max(1, (cfg.iterations + bank.size() - 1) / bank.size());

  StageLoop loop{cfg, state, out, nullptr, nullptr};
  loop.evaluate = [&] {
    ag::NoGradGuard ng;
    double acc = 0.0;
    for (int k = 0; k < bank.size(); ++k) acc += value_of(objective(k, eval_sets[static_cast<std::size_t>(k)], nullptr)[0]);
    return acc / bank.size();
  };
  loop.step = [&](int it) {
    // Single-domain batches: consecutive blocks of iterations per book.
    const int k = std::min(bank.size() - 1, (it - 1) / per_book);
    const auto& pool = pools[static_cast<std::size_t>(k)];
    std::vector<int> idx;
    for (int b = 0; b < cfg.batch_size; ++b) idx.push_back(pick_from(rng, pool));
    std::vector<int> codes;
    auto terms = objective(k, idx, &codes);
    screen_loss(terms[0], it, hooks);
    auto& opt = opts[static_cast<std::size_t>(k)];
    opt.zero_grad();
    ag::backward(terms[0]);
    opt.step();
    Metrics m{{"total", value_of(terms[0])},
              {"photo", value_of(terms[1])},
              {"perceptual", value_of(terms[2])},
              {"code", value_of(terms[3])},
              {"book", k},
              {"perplexity", codebook_stats(codes, bank.books[static_cast<std::size_t>(k)].size()).perplexity}};
    // Restarts run on each book's own schedule within its block of iterations.
    auto& mon = monitors[static_cast<std::size_t>(k)];
    mon.record(codes);
    const int local = it - k * per_book;
    if (cfg.restart_every > 0 && local % cfg.restart_every == 0 && local <= cfg.restart_until * per_book) {
      std::vector<int> sample;
      for (int b = 0; b < 64; ++b) sample.push_back(pick_from(restart_rng, pool));
      m["restarted"] = mon.restart(bank.books[static_cast<std::size_t>(k)].codes, stack(sample), restart_rng);
    }
    return m;
  };
  return loop.run();
}

// ---------------------------------------------------------------------------
// Fusion: per-cell book weights, balanced over the five domains.

TrainResult run_fusion(const TrainConfig& cfg, const Dataset& data, ModelState& state, const fs::path& out,
                       const TrainHooks& hooks) {
  require(state, Stage::domains, Stage::fusion);
  state.add_fusion();
  set_trainable(state, Stage::fusion);

  std::vector<std::vector<int>> pools;
  for (Domain d : kAllDomains) {
    pools.push_back(data.select("train", d));
    if (pools.back().empty()) throw MissingDomainError("fusion: no training images for domain " + to_string(d));
  }
  // Encoder and books are frozen: latents and per-book quantizations are cached.
  struct Cached {
    Tensor z;
    std::vector<Tensor> zq;
  };
  std::map<int, Cached> cache;
  {
    ag::NoGradGuard ng;
    for (const auto& pool : pools)
      for (int i : pool) {
        const Var z = state.base.encode(ag::constant(data.batch(std::span<const int>(&i, 1))));
        Cached c{z->value, {}};
        for (const auto& q : multi_quantize(z, *state.bank)) c.zq.push_back(q.values->value);
        cache[i] = std::move(c);
      }
  }
  const int books = state.bank->size();
  auto objective = [&](const std::vector<int>& idx) {
    std::vector<Tensor> zs;
    std::vector<std::vector<Tensor>> per_book(static_cast<std::size_t>(books));
    for (int i : idx) {
      const auto& c = cache.at(i);
      zs.push_back(c.z);
      for (int k = 0; k < books; ++k) per_book[static_cast<std::size_t>(k)].push_back(c.zq[static_cast<std::size_t>(k)]);
    }
    std::vector<int> order(idx.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    const Var z = ag::constant(stack_rows(zs, order));
    std::vector<Var> zq;
    for (const auto& rows : per_book) zq.push_back(ag::constant(stack_rows(rows, order)));
    const Var fused = fuse(zq, (*state.fusion)(z));
    const Var x = ag::constant(data.batch(idx));
    const Var img = state.base.decode(fused).image;
    const Var photo = photo_loss(img, x);
    const Var perc = perceptual_loss(img, x, state.perceptual);
    return std::array<Var, 3>{ag::add(photo, ag::scale(perc, cfg.stage1_weights.eta1)), photo, perc};
  };

  std::vector<int> eval_set;
  for (std::size_t d = 0; d < pools.size(); ++d) {
    const auto e = eval_indices(pools[d], 3, mix_seed(cfg.seed, d));
    eval_set.insert(eval_set.end(), e.begin(), e.end());
  }
  ag::Adam opt(state.fusion_params.vars(), {cfg.lr});
  Rng rng(mix_seed(cfg.seed, 0xf0f0));

  StageLoop loop{cfg, state, out, nullptr, nullptr};
  loop.evaluate = [&] {
    ag::NoGradGuard ng;
    return value_of(objective(eval_set)[0]);
  };
  loop.step = [&](int it) {
    std::vector<int> idx;
    for (int b = 0; b < cfg.batch_size; ++b) idx.push_back(pick_from(rng, pick_from(rng, pools)));
    auto terms = objective(idx);
    screen_loss(terms[0], it, hooks);
    opt.zero_grad();
    ag::backward(terms[0]);
    opt.step();
    return Metrics{{"total", value_of(terms[0])}, {"photo", value_of(terms[1])}, {"perceptual", value_of(terms[2])}};
  };
  return loop.run();
}

// ---------------------------------------------------------------------------
// Embedder: cosine classifier over the training identities.

TrainResult run_embedder(const TrainConfig& cfg, const Dataset& data, ModelState& state, const fs::path& out,
                         const TrainHooks& hooks) {
  const auto pool = data.select("train", Domain::rgb);
  if (pool.empty()) throw MissingDomainError("embedder: no rgb training images");
  const auto ids = data.identities("train");
  std::map<int, int> label_of;
  for (std::size_t i = 0; i < ids.size(); ++i) label_of[ids[i]] = static_cast<int>(i);
  if (state.embedder && state.classifier_params.get("weight")->value.dim(0) != static_cast<int>(ids.size())) {
    throw PrerequisiteError("embedder: checkpoint classifier does not match the training identities");
  }
  state.add_embedder(static_cast<int>(ids.size()));
  set_trainable(state, Stage::embedder);
  const Embedder& emb = *state.embedder;
  const Var class_w = state.classifier_params.get("weight");

  auto objective = [&](const Tensor& x, const std::vector<int>& idx) {
    std::vector<int> labels;
    for (int i : idx) labels.push_back(label_of.at(data.item(i).identity));
    return ag::cross_entropy(emb.class_logits(emb(ag::constant(x)), class_w), labels);
  };
  const auto eval_set = eval_indices(pool, 32, cfg.seed);
  const Tensor eval_x = data.batch(eval_set);
  ag::Adam opt(params_of(state, {"embedder", "classifier"}), {cfg.lr});
  Rng rng(mix_seed(cfg.seed, 0xe3e3));

  StageLoop loop{cfg, state, out, nullptr, nullptr};
  loop.evaluate = [&] {
    ag::NoGradGuard ng;
    return value_of(objective(eval_x, eval_set));
  };
  loop.step = [&](int it) {
    std::vector<int> idx;
    for (int b = 0; b < cfg.batch_size; ++b) idx.push_back(pick_from(rng, pool));
    Tensor x = data.batch(idx);
    // Photometric jitter so the embedding keys on structure, not exposure.
    const std::size_t per = x.numel() / idx.size();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float gain = static_cast<float>(uniform(rng, 0.85, 1.15));
      const float bias = static_cast<float>(uniform(rng, -0.06, 0.06));
      for (std::size_t i = 0; i < per; ++i) {
        float& v = x[b * per + i];
        v = std::clamp(v * gain + bias, 0.0f, 1.0f);
      }
    }
    Var loss = objective(x, idx);
    screen_loss(loss, it, hooks);
    opt.zero_grad();
    ag::backward(loss);
    opt.step();
    return Metrics{{"total", value_of(loss)}};
  };
  return loop.run();
}

// ---------------------------------------------------------------------------
// Swapper: identity-conditioned branches on the frozen pipeline.

TrainResult run_swapper(const TrainConfig& cfg, const Dataset& data, ModelState& state, const fs::path& out,
                        const TrainHooks& hooks) {
  require(state, Stage::fusion, Stage::swapper);
  require(state, Stage::embedder, Stage::swapper);
  state.add_swapper();
  set_trainable(state, Stage::swapper);
  const SwapModels models = state.swap_models();
  models.require_complete();

  const auto pool = data.select("train", Domain::rgb);
  if (pool.empty()) throw MissingDomainError("swapper: no rgb training images");
  std::map<int, std::vector<int>> by_identity;
  for (int i : pool) by_identity[data.item(i).identity].push_back(i);
  std::vector<int> ids;
  for (const auto& [id, items] : by_identity) ids.push_back(id);
  if (ids.size() < 2) throw MissingDomainError("swapper: needs at least two training identities");

  // Everything upstream of the branches is frozen: cache fused latents and
  // identity embeddings per item.
  std::map<int, Tensor> fused, embedding;
  {
    ag::NoGradGuard ng;
    for (int i : pool) {
      const Var x = ag::constant(data.batch(std::span<const int>(&i, 1)));
      fused[i] = fused_latent(*models.base, *models.bank, *models.fusion, x).fused->value;
      embedding[i] = (*models.embedder)(x)->value;
    }
  }
  auto gather = [](const std::map<int, Tensor>& m, const std::vector<int>& idx) {
    std::vector<Tensor> rows;
    for (int i : idx) rows.push_back(m.at(i));
    std::vector<int> order(idx.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    return stack_rows(rows, order);
  };

  const auto& w = cfg.stage2_weights;
  struct Terms {
    Var total, identity, photo, perceptual, adversarial, image;
  };
  auto objective = [&](const std::vector<int>& tmpl, const std::vector<int>& face, bool adversarial) {
    const auto same = std::make_unique<bool[]>(tmpl.size());
    for (std::size_t b = 0; b < tmpl.size(); ++b) {
      same[b] = data.item(tmpl[b]).identity == data.item(face[b]).identity;
    }
    const Var x = ag::constant(data.batch(tmpl));
    const Var z_id = ag::constant(gather(embedding, face));
    const Var img = models.base->decode(ag::constant(gather(fused, tmpl)), models.swapper->hook(z_id)).image;
    SwapComponents c;
    c.identity = identity_loss(z_id, (*models.embedder)(img));
    c.photo = gated_photo_loss(img, x, std::span<const bool>(same.get(), tmpl.size()));
    c.lpips = perceptual_loss(img, x, state.perceptual);
    c.adversarial = adversarial ? projected_gan_loss(x, img, state.pyramid, state.pyramid_discs, Side::generator)
                                : ag::constant(Tensor({1}));
    // The photo term is already gated per sample.
    return Terms{swap_total(c, true, w), c.identity, c.photo, c.lpips, c.adversarial, img};
  };

  Rng rng(mix_seed(cfg.seed, 0x5a5a));
  auto draw_pair = [&](std::vector<int>& tmpl, std::vector<int>& face) {
    tmpl.clear();
    face.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int t = pick_from(rng, pool);
      const int tid = data.item(t).identity;
      int f;
      if (unit_uniform(rng) < cfg.same_identity_rate) {
        // Another view of the template identity when one exists.
        std::vector<int> others;
        for (int i : by_identity.at(tid))
          if (i != t) others.push_back(i);
        f = others.empty() ? t : pick_from(rng, others);
      } else {
        int oid = tid;
        while (oid == tid) oid = pick_from(rng, ids);
        f = pick_from(rng, by_identity.at(oid));
      }
      tmpl.push_back(t);
      face.push_back(f);
    }
  };

  std::vector<int> eval_t, eval_f;
  {
    // The evaluation pairs come from their own stream so training draws are unaffected.
    Rng er(mix_seed(cfg.seed, 0xe7a1));
    std::swap(rng, er);
    draw_pair(eval_t, eval_f);
    std::swap(rng, er);
  }

  ag::Adam opt_g(state.swapper_params.vars(), {cfg.lr, 0.5f, 0.9f});
  ag::Adam opt_d(state.pyramid_disc_params.vars(), {cfg.disc_lr, 0.5f, 0.9f});

  StageLoop loop{cfg, state, out, nullptr, nullptr};
  loop.evaluate = [&] {
    ag::NoGradGuard ng;
    return value_of(objective(eval_t, eval_f, false).total);
  };
  loop.step = [&](int it) {
    std::vector<int> tmpl, face;
    draw_pair(tmpl, face);
    Terms t = objective(tmpl, face, true);
    screen_loss(t.total, it, hooks);
    opt_g.zero_grad();
    opt_d.zero_grad();
    ag::backward(t.total);
    opt_g.step();

    opt_d.zero_grad();
    const Var x = ag::constant(data.batch(tmpl));
    Var d_loss = projected_gan_loss(x, ag::detach(t.image), state.pyramid, state.pyramid_discs, Side::discriminator);
    ag::backward(d_loss);
    opt_d.step();
    return Metrics{{"total", value_of(t.total)},
                   {"identity", value_of(t.identity)},
                   {"photo", value_of(t.photo)},
                   {"perceptual", value_of(t.perceptual)},
                   {"adversarial", value_of(t.adversarial)},
                   {"disc", value_of(d_loss)}};
  };
  return loop.run();
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& data, ModelState& state, const fs::path& out_dir,
                  const TrainHooks& hooks) {
  config.validate();
  switch (config.stage) {
    case Stage::stage1: return run_stage1(config, data, state, out_dir, hooks);
    case Stage::domains: return run_domains(config, data, state, out_dir, hooks);
    case Stage::fusion: return run_fusion(config, data, state, out_dir, hooks);
    case Stage::embedder: return run_embedder(config, data, state, out_dir, hooks);
    case Stage::swapper: return run_swapper(config, data, state, out_dir, hooks);
  }
  throw UnknownStageError("unknown stage");
}

namespace {
TrainResult train_as(Stage stage, TrainConfig config, const Dataset& data, ModelState& state, const fs::path& out) {
  if (config.stage != stage) throw std::invalid_argument("train: config is for stage " + to_string(config.stage));
  return train(config, data, state, out);
}
}  // namespace

TrainResult train_stage1(const TrainConfig& c, const Dataset& d, ModelState& s, const fs::path& o) {
  return train_as(Stage::stage1, c, d, s, o);
}
TrainResult finetune_domain_codebooks(const TrainConfig& c, const Dataset& d, ModelState& s, const fs::path& o) {
  return train_as(Stage::domains, c, d, s, o);
}
TrainResult train_fusion(const TrainConfig& c, const Dataset& d, ModelState& s, const fs::path& o) {
  return train_as(Stage::fusion, c, d, s, o);
}
TrainResult train_embedder(const TrainConfig& c, const Dataset& d, ModelState& s, const fs::path& o) {
  return train_as(Stage::embedder, c, d, s, o);
}
TrainResult train_swapper(const TrainConfig& c, const Dataset& d, ModelState& s, const fs::path& o) {
  return train_as(Stage::swapper, c, d, s, o);
}

}  // namespace idref
