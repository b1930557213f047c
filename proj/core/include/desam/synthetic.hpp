// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Multi-site geometric-shape datasets for smoke tests, benchmarks and demos.
// Each image holds one target ellipse (the mask) plus an optional distractor;
// sites differ in contrast, brightness and noise.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "desam/dataset_io.hpp"

namespace desam {

/// square: a dimmer square in a corner. dimmer_ellipse: a second ellipse
/// whose intensity is below the target's by a per-image margin, so telling
/// the two apart needs the whole image.
enum class Distractor { none, square, dimmer_ellipse };

std::string to_string(Distractor d);
Distractor parse_distractor(const std::string& s);

struct SyntheticOptions {
  std::vector<std::string> sites{"A", "B", "C"};
  std::size_t samples_per_site = 20;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
  Distractor distractor = Distractor::square;
};

struct SiteStyle {
  double background = 0.2;
  double foreground = 0.7;
  double distractor = 0.45;
  double noise = 0.03;
};

SiteStyle site_style(const std::string& site, std::uint64_t seed);

SegmentationSample make_synthetic_sample(const std::string& site, std::size_t index,
                                         const SyntheticOptions& options);

/// Writes rasters under `dir` plus `dir/manifest.csv`; returns the manifest path.
std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir,
                                              const SyntheticOptions& options);

}  // namespace desam
