// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "idref/layers.hpp"
#include "idref/tensor.hpp"

namespace idref {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TensorMap = std::map<std::string, nn::Tensor>;

/// On-disk array container: a directory holding `manifest.json` (name ->
/// shape, dtype, byte offset, byte length, sha256) and `params.bin` with the
/// raw little-endian float32 blobs in name order.
struct Checkpoint {
  TensorMap arrays;
  nlohmann::json config = nlohmann::json::object();
};

/// Writes atomically: the container is staged next to `dir` and renamed
/// over it, so a crash never leaves a half-written checkpoint.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);

/// Loads and verifies every digest. Throws CheckpointError on any mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

bool is_checkpoint(const std::filesystem::path& dir);

/// sha256 of the manifest file, used as a stable checkpoint fingerprint.
std::string checkpoint_digest(const std::filesystem::path& dir);

/// Copies every parameter of `ps` into `out` as `prefix + name`.
void store_params(TensorMap& out, const nn::ParamSet& ps, const std::string& prefix);

/// Overwrites every parameter of `ps` from `in`. Missing names or shape
/// mismatches throw CheckpointError.
void load_params(const TensorMap& in, nn::ParamSet& ps, const std::string& prefix);

}  // namespace idref
