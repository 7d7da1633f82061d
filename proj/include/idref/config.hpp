// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>

#include <json.hpp>

#include "idref/datagen.hpp"
#include "idref/metrics.hpp"
#include "idref/stitcher.hpp"
#include "idref/trainer.hpp"

namespace idref {

nlohmann::json to_json(const DatagenConfig& c);
/// Absent keys keep `base`.
DatagenConfig datagen_from_json(const nlohmann::json& j, const DatagenConfig& base = {});

/// Every setting of the pipeline. Keys absent from a config file keep their
/// defaults, so `defaults().to_json()` documents the whole format.
struct PipelineConfig {
  DatagenConfig data;
  ModelConfig model;
  std::map<Stage, TrainConfig> train;
  StitchConfig stitch;
  SsimConfig ssim;
  ProbeConfig probe;

  static PipelineConfig defaults();
  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& file);

  /// Sets the dataset, model and every stage seed to `seed`.
  void set_seed(std::uint64_t seed);
  const TrainConfig& stage(Stage s) const { return train.at(s); }
};

}  // namespace idref
