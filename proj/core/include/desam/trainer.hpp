// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Fine-tunes PRIM and PIMM over cached embeddings. The image encoder never
// runs here and the prompt encoder stays frozen; only masks are read from disk.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "desam/dataset_io.hpp"
#include "desam/encoder_cache.hpp"
#include "desam/inference.hpp"
#include "desam/losses_metrics.hpp"
#include "desam/model.hpp"
#include "desam/prompt_engine.hpp"

namespace desam {

enum class LrDecay { poly, constant };

struct TrainConfig {
  PromptMode mode = PromptMode::grid_points;
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  LossWeights weights;
  std::uint64_t seed = 0;
  LrDecay lr_decay = LrDecay::poly;
  double lr_power = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t n_pos = 1;
  std::size_t n_neg = 1;
  SplitRatio split;
  ModelConfig model;
  /// Expected encoder spec (EncoderSpec::to_string form). Empty accepts
  /// whatever the cache was built with.
  std::string encoder;
  /// "random", or a checkpoint path whose PRIM weights seed this run.
  std::string prim_init = "random";
  /// Grid side used for validation and evaluation in grid_points mode.
  std::size_t eval_grid = 9;
  MergeStrategy merge;
  /// Validate every this many epochs (the last epoch is always validated).
  std::size_t val_interval = 1;

  void validate() const;
  /// Canonical `key = value` lines in a fixed key order.
  std::string to_text() const;
  /// Inverse of to_text(). Unknown or repeated keys are errors; missing keys
  /// keep their defaults. `#` starts a comment line.
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);

  friend bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return a.to_text() == b.to_text();
  }
};

/// Polynomial decay lr * (1 - step/total)^power, clamped to 0 past the end.
double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& config);

struct Checkpoint {
  TrainConfig config;
  DesamModel model;
  std::string source_site;
  std::size_t epoch = 0;
  std::vector<double> val_dice_history;
  std::uint64_t cache_hash = 0;

  /// DSCK container: header, config text, meta text, then named tensors with
  /// per-tensor crc32.
  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// True iff the frozen prompt parameters and the cache hash match bit for bit.
bool freeze_audit(const Checkpoint& before, const Checkpoint& after);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct TrainResult {
  Checkpoint initial;  // state before the first update
  Checkpoint best;     // best validation dice
  std::vector<StepRecord> log;
};

TrainResult train(const TrainConfig& config, const EvalPlan& plan, const CacheIndex& cache,
                  const DatasetManifest& manifest);

}  // namespace desam
