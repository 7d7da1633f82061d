// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "idref/checkpoint.hpp"
#include "idref/dataset.hpp"
#include "idref/fusion.hpp"
#include "idref/losses.hpp"
#include "idref/swapper.hpp"
#include "idref/vqcore.hpp"

namespace idref {

enum class Stage { stage1, domains, fusion, embedder, swapper };
inline constexpr std::array<Stage, 5> kAllStages{Stage::stage1, Stage::domains, Stage::fusion, Stage::embedder,
                                                 Stage::swapper};
std::string to_string(Stage stage);
Stage parse_stage(const std::string& s);

class UnknownStageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A stage was asked to run without the checkpoint it builds on.
class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A training subset the stage needs is empty.
class MissingDomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite loss stopped the run. `last_good` holds the parameters from
/// before the failing step.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::filesystem::path last_good)
      : std::runtime_error(what), last_good(std::move(last_good)) {}
  std::filesystem::path last_good;
};

/// A parameter group that should be frozen changed during training.
class FreezeViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Architecture of every component plus the initialisation seed.
struct ModelConfig {
  VqConfig vq;
  FusionConfig fusion;
  EmbedderConfig embedder;
  SwapperConfig swapper;
  std::uint64_t seed = 0;

  ModelConfig();
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  Stage stage = Stage::stage1;
  std::filesystem::path manifest;
  int batch_size = 8;
  float lr = 1e-3f;
  int iterations = 1000;
  Stage1Weights stage1_weights;
  Stage2Weights stage2_weights;
  std::uint64_t seed = 0;
  int log_every = 25;
  /// Rotating checkpoints every this many iterations; 0 writes only the final one.
  int checkpoint_every = 0;
  int keep = 2;
  std::string device = "cpu";

  /// stage1: iteration after which the adversarial term is switched on.
  int adv_start = 0;
  /// stage1: rgb samples drawn per reflectance sample.
  double rgb_per_reflectance = 10.0;
  /// stage1 and swapper: discriminator learning rate.
  float disc_lr = 2e-4f;
  /// stage1 and domains: every this many iterations codes unused since the
  /// last restart are re-seeded from current latents; 0 disables.
  int restart_every = 50;
  /// Restarts stop after this fraction of the run so codes can settle.
  double restart_until = 0.75;
  /// swapper: fraction of pairs whose identity face shows the template identity.
  double same_identity_rate = 0.5;

  static TrainConfig defaults(Stage stage);
  void validate() const;
  nlohmann::json to_json() const;
  /// Keys absent from `j` keep the stage defaults.
  static TrainConfig from_json(const nlohmann::json& j, Stage stage);
};

/// Every component the pipeline can hold. Components beyond the autoencoder
/// appear as their stages are reached.
class ModelState {
 public:
  ModelConfig config;
  std::vector<Stage> stages;  // completed, in order

  ModelBundle base;
  nn::ParamSet disc_params;
  PatchDiscriminator disc;

  std::optional<CodebookBank> bank;
  nn::ParamSet fusion_params;
  std::optional<FusionNet> fusion;
  nn::ParamSet embedder_params, classifier_params;
  std::optional<Embedder> embedder;
  nn::ParamSet swapper_params, pyramid_disc_params;
  std::optional<Swapper> swapper;
  std::vector<FeatureDiscriminator> pyramid_discs;

  FeatureNet perceptual = FeatureNet::perceptual();
  FeatureNet pyramid = FeatureNet::pyramid();

  static ModelState create(const ModelConfig& cfg);
  static ModelState load(const std::filesystem::path& checkpoint_dir);

  bool has(Stage stage) const;
  void add_bank();
  void add_fusion();
  void add_embedder(int classes);
  void add_swapper();

  SwapModels swap_models() const;

  /// Parameter groups by name: encoder, decoder, codebook, disc, bank,
  /// fusion, embedder, classifier, swapper, pyramid_disc.
  std::map<std::string, const nn::ParamSet*> groups() const;
  std::map<std::string, std::string> digests() const;

  Checkpoint to_checkpoint() const;
  void save(const std::filesystem::path& dir, const nlohmann::json& extra = nlohmann::json::object()) const;

 private:
  ModelState() = default;
};

/// Groups a stage updates; every other present group must stay bit-identical.
std::vector<std::string> trainable_groups(Stage stage);

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<nlohmann::json> log;
  /// Stage objective on a fixed evaluation batch before and after training.
  double initial_eval = 0.0;
  double final_eval = 0.0;
  std::map<std::string, std::string> frozen_digests;
};

struct TrainHooks {
  /// Called with every total loss before backward; tests use it to inject
  /// non-finite values.
  std::function<void(int iteration, Var& loss)> on_loss;
};

/// Runs `config.stage` on `state`, writing `out_dir/log.jsonl`,
/// `out_dir/timing.jsonl`, rotating `out_dir/step_NNNNNN` checkpoints and
/// `out_dir/final`.
TrainResult train(const TrainConfig& config, const Dataset& data, ModelState& state,
                  const std::filesystem::path& out_dir, const TrainHooks& hooks = {});

TrainResult train_stage1(const TrainConfig& config, const Dataset& data, ModelState& state,
                         const std::filesystem::path& out_dir);
TrainResult finetune_domain_codebooks(const TrainConfig& config, const Dataset& data, ModelState& state,
                                      const std::filesystem::path& out_dir);
TrainResult train_fusion(const TrainConfig& config, const Dataset& data, ModelState& state,
                         const std::filesystem::path& out_dir);
TrainResult train_embedder(const TrainConfig& config, const Dataset& data, ModelState& state,
                           const std::filesystem::path& out_dir);
TrainResult train_swapper(const TrainConfig& config, const Dataset& data, ModelState& state,
                          const std::filesystem::path& out_dir);

/// Items used to fine-tune `tag`'s book: the matching reflectance domain, or
/// rgb for the texture book.
Domain training_domain(CodebookTag tag);

}  // namespace idref
