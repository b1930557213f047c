// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Segmentation losses, the IoU regression target and the dice metric.
// Points mode:  total = l1 * dice + l2 * ce + l3 * mse
// Box mode:     total = dice + ce

#pragma once

#include <optional>

#include "desam/autograd.hpp"
#include "desam/dataset_io.hpp"
#include "desam/prompt_engine.hpp"
#include "desam/tensor.hpp"

namespace desam {

inline constexpr double kDiceEpsilon = 1e-5;

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 10.0;

  void validate() const;
};

struct LossBreakdown {
  double dice = 0.0;
  double ce = 0.0;
  std::optional<double> mse;
  double total = 0.0;
  PromptMode mode = PromptMode::grid_points;
};

/// Binary mask as a 0/1 tensor of shape [H, W].
Tensor mask_to_tensor(const Mask& m);
/// sigmoid(logit) > threshold, i.e. logit > log(t / (1 - t)).
Mask threshold_logits(const Tensor& logits, double threshold = 0.5);

/// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps), p = sigmoid(logits).
double dice_loss(const Tensor& logits, const Mask& gt);
ag::Var dice_loss(const ag::Var& logits, const Tensor& gt);

/// Mean binary cross-entropy, evaluated stably from logits.
double ce_loss(const Tensor& logits, const Mask& gt);
ag::Var ce_loss(const ag::Var& logits, const Tensor& gt);

/// |pred & gt| / |pred | gt|; 1 when both are empty.
double iou_target(const Mask& pred, const Mask& gt);

double mse_loss(double pred, double target);
ag::Var mse_loss(const ag::Var& pred, double target);

/// Throws ValidationError when `mse` presence disagrees with `mode`.
LossBreakdown combined_loss(PromptMode mode, double dice, double ce, std::optional<double> mse,
                            const LossWeights& w);
ag::Var combined_loss(PromptMode mode, const ag::Var& dice, const ag::Var& ce, const ag::Var& mse,
                      const LossWeights& w);

/// 2|pred & gt| / (|pred| + |gt|); 1 when both are empty.
double dice_score(const Mask& pred, const Mask& gt);

}  // namespace desam
