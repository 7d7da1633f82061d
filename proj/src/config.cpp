// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/config.hpp"

#include <fstream>

namespace idref {

using nlohmann::json;

json to_json(const DatagenConfig& c) {
  return {{"identities", c.identities},
          {"image_size", c.image_size},
          {"split", c.split},
          {"reflectance_ratio", c.reflectance_ratio},
          {"seed", c.seed}};
}

DatagenConfig datagen_from_json(const json& j, const DatagenConfig& base) {
  DatagenConfig c = base;
  c.identities = j.value("identities", c.identities);
  c.image_size = j.value("image_size", c.image_size);
  c.split = j.value("split", c.split);
  c.reflectance_ratio = j.value("reflectance_ratio", c.reflectance_ratio);
  c.seed = j.value("seed", c.seed);
  return c;
}

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig p;
  for (Stage s : kAllStages) p.train.emplace(s, TrainConfig::defaults(s));
  return p;
}

json PipelineConfig::to_json() const {
  json t = json::object();
  for (const auto& [s, c] : train) t[to_string(s)] = c.to_json();
  return {{"data", idref::to_json(data)},
          {"model", model.to_json()},
          {"train", t},
          {"stitch", stitch.to_json()},
          {"metrics", {{"ssim", ssim.to_json()}, {"probe", probe.to_json()}}}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig p = defaults();
  for (const auto& [k, v] : j.items()) {
    if (k != "data" && k != "model" && k != "train" && k != "stitch" && k != "metrics") {
      throw std::invalid_argument("config: unknown section '" + k + "'");
    }
  }
  if (j.contains("data")) p.data = datagen_from_json(j.at("data"));
  if (j.contains("model")) p.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) {
    for (const auto& [k, v] : j.at("train").items()) {
      const Stage s = parse_stage(k);
      p.train[s] = TrainConfig::from_json(v, s);
    }
  }
  if (j.contains("stitch")) p.stitch = StitchConfig::from_json(j.at("stitch"));
  if (j.contains("metrics")) {
    const json& m = j.at("metrics");
    if (m.contains("ssim")) p.ssim = SsimConfig::from_json(m.at("ssim"));
    if (m.contains("probe")) p.probe = ProbeConfig::from_json(m.at("probe"));
  }
  return p;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read config " + file.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw std::runtime_error(file.string() + ": " + e.what());
  }
}

void PipelineConfig::set_seed(std::uint64_t seed) {
  data.seed = seed;
  model.seed = seed;
  for (auto& [s, c] : train) c.seed = seed;
}

}  // namespace idref
