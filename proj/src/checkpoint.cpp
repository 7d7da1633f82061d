// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "idref/digest.hpp"

namespace idref {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("short write to " + path.string());
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  json arrays = json::object();
  std::string blob;
  for (const auto& [name, tensor] : ckpt.arrays) {
    const auto* bytes = reinterpret_cast<const char*>(tensor.data());
    const std::size_t nbytes = tensor.numel() * sizeof(float);
    arrays[name] = {{"shape", tensor.shape()},
                    {"dtype", "f32"},
                    {"offset", blob.size()},
                    {"nbytes", nbytes},
                    {"sha256", sha256_hex(bytes, nbytes)}};
    blob.append(bytes, nbytes);
  }
  json manifest = {{"format", "idref-checkpoint"}, {"version", 1}, {"arrays", arrays}, {"config", ckpt.config}};

  fs::path staging = dir;
  staging += ".partial";
  std::error_code ec;
  fs::remove_all(staging, ec);
  fs::create_directories(staging, ec);
  if (ec) throw CheckpointError("cannot create " + staging.string() + ": " + ec.message());
  write_file(staging / "params.bin", blob);
  write_file(staging / "manifest.json", manifest.dump(2) + "\n");
  fs::remove_all(dir, ec);
  fs::rename(staging, dir, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into " + dir.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw CheckpointError("no checkpoint at " + dir.string());
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw CheckpointError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "idref-checkpoint") throw CheckpointError("unknown format in " + dir.string());
  const std::string blob = read_file(dir / "params.bin");

  Checkpoint ckpt;
  ckpt.config = manifest.value("config", json::object());
  for (const auto& [name, meta] : manifest.at("arrays").items()) {
    if (meta.at("dtype") != "f32") throw CheckpointError(name + ": unsupported dtype");
    const auto shape = meta.at("shape").get<nn::Shape>();
    const auto offset = meta.at("offset").get<std::size_t>();
    const auto nbytes = meta.at("nbytes").get<std::size_t>();
    if (nbytes != nn::shape_numel(shape) * sizeof(float) || offset + nbytes > blob.size()) {
      throw CheckpointError(name + ": inconsistent extent");
    }
    if (sha256_hex(blob.data() + offset, nbytes) != meta.at("sha256").get<std::string>()) {
      throw CheckpointError(name + ": digest mismatch");
    }
    nn::Tensor t(shape);
    std::memcpy(t.data(), blob.data() + offset, nbytes);
    ckpt.arrays.emplace(name, std::move(t));
  }
  return ckpt;
}

bool is_checkpoint(const fs::path& dir) { return fs::exists(dir / "manifest.json") && fs::exists(dir / "params.bin"); }

std::string checkpoint_digest(const fs::path& dir) {
  const std::string bytes = read_file(dir / "manifest.json");
  return sha256_hex(bytes.data(), bytes.size());
}

void store_params(TensorMap& out, const nn::ParamSet& ps, const std::string& prefix) {
  for (const auto& [name, var] : ps.items()) out.insert_or_assign(prefix + name, var->value);
}

void load_params(const TensorMap& in, nn::ParamSet& ps, const std::string& prefix) {
  for (const auto& [name, var] : ps.items()) {
    const auto it = in.find(prefix + name);
    if (it == in.end()) throw CheckpointError("checkpoint lacks parameter " + prefix + name);
    if (!it->second.same_shape(var->value)) {
      throw CheckpointError(prefix + name + ": shape " + nn::to_string(it->second.shape()) + " does not match " +
                            nn::to_string(var->value.shape()));
    }
    var->value = it->second;
  }
}

}  // namespace idref
