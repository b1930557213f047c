// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Leave-one-site-out evaluation, ablation runs, grid sweeps and reporting.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "desam/dataset_io.hpp"
#include "desam/encoder_cache.hpp"
#include "desam/inference.hpp"
#include "desam/trainer.hpp"

namespace desam {

struct SiteReport {
  std::string site;
  std::vector<std::pair<std::string, double>> per_sample;  // dice in [0,1]
  double mean_percent = 0.0;
};

/// One table row: mean target-site dice (percent) per source site.
struct ExperimentReport {
  std::string method;
  std::map<std::string, double> per_source;
  double overall = 0.0;
};

/// Arithmetic mean; the Overall column.
double overall_of(const std::vector<double>& site_values);
ExperimentReport aggregate(const std::string& method, const std::map<std::string, double>& per_source);

/// Two decimals, halves rounded away from zero. A tiny slack absorbs binary
/// representation error so that e.g. 60.445 prints as 60.45.
std::string format_percent(double v);

/// Binary mask for one sample. The prompt mode must match the checkpoint's.
Mask predict_sample(const Checkpoint& ckpt, const ImageEmbeddingSet& embeddings,
                    const PromptSet& prompts, const MergeStrategy& merge);

SiteReport evaluate_site(const Checkpoint& ckpt, const std::string& site,
                         const std::vector<std::string>& sample_ids, const DatasetManifest& manifest,
                         const CacheIndex& cache, const MergeStrategy& merge, std::size_t grid);

struct ExperimentRun {
  ExperimentReport report;
  std::map<std::string, Checkpoint> checkpoints;  // best checkpoint per source site
  std::map<std::string, std::vector<SiteReport>> site_reports;
};

/// Trains one model per source site and evaluates it on every other site.
ExperimentRun run_experiment(const TrainConfig& config, const DatasetManifest& manifest,
                             const CacheIndex& cache, const std::string& method = "DeSAM");

/// run_experiment with the model wired as `variant`; the row is labelled by
/// the variant name.
ExperimentRun run_ablation(const TrainConfig& config, AblationVariant variant,
                           const DatasetManifest& manifest, const CacheIndex& cache);

/// Evaluation-only sweep over grid sizes using trained checkpoints.
std::map<std::size_t, ExperimentReport> grid_sweep(const std::map<std::string, Checkpoint>& checkpoints,
                                                   const DatasetManifest& manifest,
                                                   const CacheIndex& cache,
                                                   const std::vector<std::size_t>& sizes,
                                                   const MergeStrategy& merge);

/// Comma-separated table: Method, "<site> to Rest" per site, Overall.
std::string format_report_csv(const std::vector<ExperimentReport>& reports);
void emit_report(const std::vector<ExperimentReport>& reports, const std::filesystem::path& path);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};
inline constexpr Rgb kPredColor{255, 140, 0};
inline constexpr Rgb kTruthColor{30, 90, 255};
inline constexpr Rgb kBothColor{142, 115, 127};

/// Grey-scale image with prediction-only pixels in kPredColor, truth-only in
/// kTruthColor and their overlap in kBothColor.
std::vector<Rgb> render_overlay(const Image& image, const Mask& truth, const Mask& pred);
/// Writes render_overlay() as a binary PPM (P6).
void emit_overlay(const SegmentationSample& sample, const Mask& pred, const std::filesystem::path& path);

}  // namespace desam
