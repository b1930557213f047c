// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Prompt-instance inference and mask merging, shared by validation and the
// evaluator.

#pragma once

#include <string>
#include <vector>

#include "desam/dataset_io.hpp"
#include "desam/model.hpp"
#include "desam/prompt_engine.hpp"

namespace desam {

enum class MergeKind { mean_probability, max_probability, union_binary, iou_weighted };

std::string to_string(MergeKind k);
MergeKind parse_merge_kind(const std::string& s);

struct MergeStrategy {
  MergeKind kind = MergeKind::mean_probability;
  double threshold = 0.5;

  void validate() const;
};

/// Mask-level prediction used by validation and evaluation. Each grid point
/// is a separate prompt instance; maps are merged per `merge`.
Mask predict_mask(const DesamModel& model, PromptMode mode, const EmbeddingTensors& emb,
                  std::size_t eval_grid, const MergeStrategy& merge);

/// Per-instance probability maps and IoU predictions for a prompt set. In
/// grid_points mode every point is its own instance.
struct PromptOutputs {
  std::vector<Tensor> probabilities;  // [S,S] each
  std::vector<double> ious;
};
PromptOutputs run_prompts(const DesamModel& model, const EmbeddingTensors& emb,
                          const PromptSet& prompts);

/// Merges probability maps and thresholds the result.
Mask merge_predictions(const std::vector<Tensor>& probabilities, const std::vector<double>& ious,
                       const MergeStrategy& merge);

}  // namespace desam
