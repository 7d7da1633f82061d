// Copyright 2026 The idref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "idref/datagen.hpp"
#include "idref/image.hpp"
#include "idref/layers.hpp"

namespace idref {

/// A manifest with every image decoded into memory.
class Dataset {
 public:
  struct Item {
    int identity = 0;
    Domain domain = Domain::rgb;
    View view = View::frontal;
    bool train = true;
    Image pixels;
    std::string file;
    std::string correspondence;
  };

  static Dataset load(const std::filesystem::path& manifest_path);
  static Dataset from_manifest(const DatasetManifest& manifest);

  const DatasetManifest& manifest() const { return manifest_; }
  const std::vector<Item>& items() const { return items_; }
  const Item& item(int i) const { return items_[static_cast<std::size_t>(i)]; }

  /// Indices of items in `split` ("train" | "test") and `domain`, in manifest order.
  std::vector<int> select(const std::string& split, Domain domain) const;
  /// Index of (identity, domain, view) or -1.
  int find(int identity, Domain domain, View view) const;
  /// Identity ids of a split, in manifest order.
  std::vector<int> identities(const std::string& split, bool captured_only = false) const;

  /// Stacks the chosen items into [B,3,H,W].
  nn::Tensor batch(std::span<const int> indices) const;

 private:
  DatasetManifest manifest_;
  std::vector<Item> items_;
};

}  // namespace idref
