// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifests, 2D rasters, train/validation splits and
// leave-one-site-out evaluation plans.
//
// Manifest: one `sample_id,site,image_path,mask_path` record per line, `#`
// comment lines and blank lines ignored. Relative paths resolve against the
// manifest's directory.
//
// Raster: "DSIM", u32 version (1), u32 height, u32 width, u8 kind
// (0 = image, float32 LE payload; 1 = mask, u8 payload in {0,1}), row-major.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace desam {

/// Row-major 2D array.
template <class T>
struct Grid2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;

  Grid2D() = default;
  Grid2D(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), data(h * w, fill) {}

  T& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  const T& at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Grid2D&, const Grid2D&) = default;
};

using Image = Grid2D<float>;
using Mask = Grid2D<std::uint8_t>;

struct SampleRecord {
  std::string sample_id;
  std::string site;
  std::filesystem::path image_path;
  std::filesystem::path mask_path;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  std::set<std::string> sites;

  const SampleRecord& find(const std::string& sample_id) const;
  /// Sample ids of `site` in manifest order.
  std::vector<std::string> ids_for_site(const std::string& site) const;
};

struct SegmentationSample {
  std::string sample_id;
  std::string site;
  Image image;
  Mask mask;
};

struct SplitRatio {
  unsigned train = 9;
  unsigned val = 1;
};

struct EvalPlan {
  std::string source_site;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::map<std::string, std::vector<std::string>> target_sites;
};

inline constexpr std::size_t kDefaultImageSize = 288;

DatasetManifest load_manifest(const std::filesystem::path& path);
/// Parses manifest text; relative resource paths resolve against `base_dir`.
/// Resource existence is checked when `check_resources` is set.
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir,
                               bool check_resources = true);
void write_manifest(const std::filesystem::path& path, const std::vector<SampleRecord>& records);

/// Seeded partition of one site's ids. |val| = max(1, floor(n * val / (train + val))).
std::pair<std::vector<std::string>, std::vector<std::string>> split_train_val(
    const DatasetManifest& manifest, const std::string& site, SplitRatio ratio, std::uint64_t seed);

EvalPlan leave_one_site_out(const DatasetManifest& manifest, const std::string& source_site,
                            std::uint64_t seed, SplitRatio ratio = {});

SegmentationSample load_sample(const SampleRecord& record, std::size_t expected_size);
/// Loads only the mask of a record; training after precompute never touches images.
Mask load_mask(const SampleRecord& record, std::size_t expected_size);

void write_image(const std::filesystem::path& path, const Image& image);
void write_mask(const std::filesystem::path& path, const Mask& mask);
Image read_image(const std::filesystem::path& path);
Mask read_mask(const std::filesystem::path& path);

}  // namespace desam
