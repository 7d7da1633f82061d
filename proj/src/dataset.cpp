// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#include "idref/dataset.hpp"

#include <algorithm>

namespace idref {

Dataset Dataset::load(const std::filesystem::path& manifest_path) {
  return from_manifest(DatasetManifest::load(manifest_path));
}

Dataset Dataset::from_manifest(const DatasetManifest& manifest) {
  if (manifest.entries.empty()) throw DatasetError("dataset manifest has no entries");
  Dataset d;
  d.manifest_ = manifest;
  for (const auto& e : manifest.entries) {
    Item it;
    it.identity = e.identity_id.value_or(-1);
    it.domain = e.domain;
    it.view = e.view;
    const ManifestIdentity* mi = e.identity_id ? manifest.find_identity(*e.identity_id) : nullptr;
    it.train = mi == nullptr || mi->split == "train";
    it.pixels = read_png(manifest.resolve(e.file));
    if (it.pixels.height != manifest.image_size || it.pixels.width != manifest.image_size) {
      it.pixels = resize(it.pixels, manifest.image_size, manifest.image_size);
    }
    it.file = e.file;
    it.correspondence = e.correspondence;
    d.items_.push_back(std::move(it));
  }
  return d;
}

std::vector<int> Dataset::select(const std::string& split, Domain domain) const {
  const bool train = split == "train";
  if (!train && split != "test") throw DatasetError("unknown split '" + split + "'");
  std::vector<int> out;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].train == train && items_[i].domain == domain) out.push_back(static_cast<int>(i));
  }
  return out;
}

int Dataset::find(int identity, Domain domain, View view) const {
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const auto& it = items_[i];
    if (it.identity == identity && it.domain == domain && it.view == view) return static_cast<int>(i);
  }
  return -1;
}

std::vector<int> Dataset::identities(const std::string& split, bool captured_only) const {
  std::vector<int> out;
  for (const auto& mi : manifest_.identities) {
    if (mi.split == split && (!captured_only || mi.captured)) out.push_back(mi.params.id);
  }
  return out;
}

nn::Tensor Dataset::batch(std::span<const int> indices) const {
  std::vector<Image> imgs;
  imgs.reserve(indices.size());
  for (int i : indices) imgs.push_back(item(i).pixels);
  return to_tensor(imgs);
}

}  // namespace idref
