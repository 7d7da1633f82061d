// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line entry point: datagen, train, infer, ablate, metrics, probe.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "idref/config.hpp"

namespace fs = std::filesystem;
using namespace idref;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool dump_config = false;
};

PipelineConfig effective_config(const Globals& g) {
  PipelineConfig p = g.config.empty() ? PipelineConfig::defaults() : PipelineConfig::load(g.config);
  if (g.seed) p.set_seed(*g.seed);
  return p;
}

fs::path out_or(const Globals& g, const fs::path& fallback) { return g.out.empty() ? fallback : fs::path(g.out); }

void write_report(const MetricReport& r, const fs::path& dir, const std::string& name) {
  const json j = r.to_json();
  const auto problems = validate_report(j);
  if (!problems.empty()) throw std::logic_error("report does not match its schema: " + problems.front());
  r.save(dir / (name + ".json"));
  std::cout << (dir / (name + ".json")).string() << '\n';
}

std::optional<TemplateLibrary> library_if(const std::string& dir) {
  if (dir.empty()) return std::nullopt;
  return TemplateLibrary::load(dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"idref: reflectance maps from a single face image"};
  app.require_subcommand(0, 1);
  Globals g;
  app.add_option("--config", g.config, "Pipeline config JSON; absent keys keep defaults")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for data, model initialisation and every stage");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--dump-config", g.dump_config, "Print the effective config and exit");

  // datagen
  auto* datagen = app.add_subcommand("datagen", "Generate the synthetic dataset or ingest a folder");
  std::optional<int> identities, size;
  std::optional<double> ratio;
  std::string ingest, ingest_domain = "rgb";
  datagen->add_option("--identities", identities, "Number of identities");
  datagen->add_option("--size", size, "Image size in pixels");
  datagen->add_option("--reflectance-ratio", ratio, "Fraction of identities with reflectance captures");
  datagen->add_option("--ingest", ingest, "Resize the PNGs of this folder instead of generating")
      ->check(CLI::ExistingDirectory);
  datagen->add_option("--domain", ingest_domain, "Domain of ingested images");

  // train
  auto* train_cmd = app.add_subcommand("train", "Run one training stage");
  std::string stage_name, data_path, from;
  train_cmd->add_option("stage", stage_name, "stage1 | domains | fusion | embedder | swapper")->required();
  train_cmd->add_option("--data", data_path, "Dataset manifest (default: the stage's manifest key)");
  train_cmd->add_option("--from", from, "Checkpoint to continue from");

  // infer
  auto* infer = app.add_subcommand("infer", "Reflectance UV maps for one face image");
  std::string image_path, library_dir, ckpt;
  std::optional<int> uv_size, identity;
  infer->add_option("--image", image_path, "Face PNG")->required()->check(CLI::ExistingFile);
  infer->add_option("--library", library_dir, "Template library directory")->required();
  infer->add_option("--ckpt", ckpt, "Checkpoint with every stage")->required();
  infer->add_option("--data", data_path, "Manifest used to build the library when it does not exist yet");
  infer->add_option("--uv-size", uv_size, "UV map resolution");
  infer->add_option("--identity", identity, "Identity id recorded in the provenance");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Joint against multi-domain codebooks, fixed against closest template");
  std::string joint_ckpt, multi_ckpt;
  ablate->add_option("--joint", joint_ckpt, "Checkpoint of the joint-codebook arm")->required();
  ablate->add_option("--multi", multi_ckpt, "Checkpoint of the multi-domain arm")->required();
  ablate->add_option("--data", data_path, "Dataset manifest")->required();
  ablate->add_option("--library", library_dir, "Template library for the swap rows");

  // metrics
  auto* metrics = app.add_subcommand("metrics", "PSNR, SSIM, perceptual proxy and identity cosine");
  metrics->add_option("--ckpt", ckpt, "Checkpoint")->required();
  metrics->add_option("--data", data_path, "Dataset manifest")->required();
  metrics->add_option("--library", library_dir, "Template library for identity cosine");

  // probe
  auto* probe = app.add_subcommand("probe", "Linear probe of domain from fused latents");
  probe->add_option("--ckpt", ckpt, "Checkpoint")->required();
  probe->add_option("--data", data_path, "Dataset manifest")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    PipelineConfig cfg = effective_config(g);
    if (g.dump_config) {
      std::cout << cfg.to_json().dump(2) << '\n';
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return 2;
    }

    if (*datagen) {
      if (!ingest.empty()) {
        const Domain d = parse_domain(ingest_domain);
        const fs::path out = out_or(g, "ingested");
        const IngestResult r = ingest_folder(ingest, d, size.value_or(cfg.data.image_size));
        fs::create_directories(out);
        json files = json::array();
        for (std::size_t i = 0; i < r.images.size(); ++i) {
          write_png(out / r.fragment.entries[i].file, r.images[i].pixels);
          files.push_back(r.fragment.entries[i].file);
        }
        std::ofstream(out / "fragment.json")
            << json{{"domain", ingest_domain}, {"files", files}, {"errors", r.errors}}.dump(2) << '\n';
        for (const auto& e : r.errors) std::cerr << "skipped " << e << '\n';
        std::cout << r.images.size() << " images ingested into " << out.string() << '\n';
        return 0;
      }
      if (identities) cfg.data.identities = *identities;
      if (size) cfg.data.image_size = *size;
      if (ratio) cfg.data.reflectance_ratio = *ratio;
      const fs::path out = out_or(g, "data");
      const DatasetManifest m = build_dataset(cfg.data, out);
      std::cout << (out / "manifest.json").string() << " (" << m.entries.size() << " images)\n";
      return 0;
    }

    if (*train_cmd) {
      const Stage stage = parse_stage(stage_name);
      TrainConfig tc = cfg.stage(stage);
      if (!data_path.empty()) tc.manifest = data_path;
      if (tc.manifest.empty()) throw std::invalid_argument("train: no dataset manifest (use --data)");
      if (from.empty() && stage != Stage::stage1) {
        throw PrerequisiteError(to_string(stage) + " needs --from with a checkpoint that completed the earlier stages");
      }
      ModelState state = from.empty() ? ModelState::create(cfg.model) : ModelState::load(from);
      const Dataset data = Dataset::load(tc.manifest);
      const TrainResult r = train(tc, data, state, out_or(g, fs::path("runs") / to_string(stage)));
      std::cout << r.checkpoint.string() << '\n';
      return 0;
    }

    if (*infer) {
      const ModelState state = ModelState::load(ckpt);
      const SwapModels models = state.swap_models();
      models.require_complete();
      TemplateLibrary lib;
      if (fs::exists(fs::path(library_dir) / "library.json")) {
        lib = TemplateLibrary::load(library_dir);
      } else {
        if (data_path.empty()) throw StitchError("no library at " + library_dir + "; pass --data to build one");
        lib = TemplateLibrary::build(Dataset::load(data_path), "train", *models.embedder);
        lib.save(library_dir);
      }
      StitchConfig sc = cfg.stitch;
      if (uv_size) sc.uv_size = *uv_size;
      const DomainImage face{read_png(image_path), Domain::rgb, View::frontal, identity};
      const UvAsset asset = reflectance_infer(face, lib, models, sc);
      const fs::path out = out_or(g, "asset");
      asset.save(out);
      std::cout << out.string() << " (template " << asset.template_id << ")\n";
      return 0;
    }

    if (*ablate) {
      const auto lib = library_if(library_dir);
      const MetricReport r = ablate_codebooks(ModelState::load(joint_ckpt), ModelState::load(multi_ckpt),
                                              Dataset::load(data_path), lib ? &*lib : nullptr);
      write_report(r, out_or(g, "reports"), "ablation");
      return 0;
    }

    if (*metrics) {
      const auto lib = library_if(library_dir);
      const MetricReport r =
          evaluate_model(ModelState::load(ckpt), Dataset::load(data_path), lib ? &*lib : nullptr, cfg.ssim);
      write_report(r, out_or(g, "reports"), "metrics");
      return 0;
    }

    if (*probe) {
      const MetricReport r = latent_separability(ModelState::load(ckpt), Dataset::load(data_path), cfg.probe);
      write_report(r, out_or(g, "reports"), "probe");
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
