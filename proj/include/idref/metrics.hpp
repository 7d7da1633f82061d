// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "idref/dataset.hpp"
#include "idref/image.hpp"
#include "idref/losses.hpp"
#include "idref/stitcher.hpp"
#include "idref/trainer.hpp"

namespace idref {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kPsnrCap = 99.0;
inline constexpr const char* kReportSchema = "idref-report/1";
inline constexpr const char* kPerceptualLabel = "perceptual (proxy)";

/// 10 log10(1 / MSE) over all channels, capped at 99 dB for MSE < 1e-10.
double psnr(const Image& a, const Image& b);

struct SsimConfig {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;

  nlohmann::json to_json() const;
  static SsimConfig from_json(const nlohmann::json& j);
};

/// BT.601 luma, row-major.
std::vector<double> luminance(const Image& img);

/// Mean local SSIM of the luminance channel over every window that lies fully
/// inside the image. Windows are uniform and use sample (co)variances.
double ssim(const Image& a, const Image& b, const SsimConfig& cfg = {});

/// Feature-space distance of the fixed perceptual extractor; not LPIPS.
double perceptual_distance(const Image& a, const Image& b, const FeatureNet& net);

using EmbedFn = std::function<std::vector<float>(const DomainImage&)>;

/// Looks faces up by identity id and returns the identity's hash embedding.
EmbedFn oracle_embedder(const DatasetManifest& manifest, int dim);
EmbedFn learned_embedder(const Embedder& embedder);

double id_similarity(const DomainImage& a, const DomainImage& b, const EmbedFn& embed);
double id_similarity(const DomainImage& a, const DomainImage& b, const Embedder& embedder);

struct PairScore {
  std::string label;
  double psnr = 0.0;
  double ssim = 0.0;
  double perceptual = 0.0;
  std::optional<double> identity;

  nlohmann::json to_json() const;
};

PairScore score_pair(const std::string& label, const Image& output, const Image& reference, const FeatureNet& proxy,
                     const SsimConfig& ssim_cfg = {});

/// Means of each column; identity only over pairs that carry it.
nlohmann::json aggregate(const std::vector<PairScore>& pairs);

struct MetricReport {
  std::string kind;  // "metrics" | "ablation" | "probe"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<PairScore> pairs;
  nlohmann::json body = nlohmann::json::object();

  nlohmann::json to_json() const;
  void save(const std::filesystem::path& file) const;
};

/// Problems with `report`; empty when it conforms to kReportSchema.
std::vector<std::string> validate_report(const nlohmann::json& report);

/// Checkpoint digests, model config and completed stages of `state`.
nlohmann::json describe_state(const ModelState& state);

/// Reflectance reconstruction of `state` on held-out images: the fused path
/// when `state` has a fusion network, the shared codebook otherwise.
Image reconstruct_reflectance(const ModelState& state, const Image& img);

/// Reconstruction scores on the test split's reflectance images, plus
/// identity cosine of swapped template faces when `state` can swap.
MetricReport evaluate_model(const ModelState& state, const Dataset& data, const TemplateLibrary* library,
                            const SsimConfig& ssim_cfg = {});

/// Per-domain held-out PSNR of the `joint` arm against the `multi` arm, and
/// fixed-template against closest-template swap PSNR when `multi` can swap.
MetricReport ablate_codebooks(const ModelState& joint, const ModelState& multi, const Dataset& data,
                              const TemplateLibrary* library);

struct ProbeConfig {
  int iterations = 300;
  double lr = 0.5;
  double l2 = 1e-4;
  /// Images drawn per domain and split.
  int max_images = 40;

  nlohmann::json to_json() const;
  static ProbeConfig from_json(const nlohmann::json& j);
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  int classes = 0;
  long train_samples = 0, test_samples = 0;
};

/// Multinomial logistic regression on standardised features [N,D], trained
/// by full-batch gradient descent from zero weights.
ProbeResult linear_probe(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                         const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y, int classes,
                         const ProbeConfig& cfg = {});

/// Linear probe predicting the domain of each fused latent cell.
MetricReport latent_separability(const ModelState& state, const Dataset& data, const ProbeConfig& cfg = {});

}  // namespace idref
