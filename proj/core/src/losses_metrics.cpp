// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/losses_metrics.hpp"

#include <cmath>

#include "desam/error.hpp"

namespace desam {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// log(1 + exp(x)) without overflow.
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

void check_mask_shape(const Tensor& logits, const Mask& gt, const char* op) {
  if (logits.rank() != 2 || logits.dim(0) != gt.height || logits.dim(1) != gt.width) {
    throw ShapeError(std::string(op) + ": logits " + shape_string(logits.shape()) + " vs mask " +
                     std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
}

void check_masks(const Mask& a, const Mask& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError(std::string(op) + ": mask shapes differ");
  }
}

}  // namespace

void LossWeights::validate() const {
  for (double l : {lambda1, lambda2, lambda3}) {
    if (!std::isfinite(l) || l < 0.0) throw ValidationError("loss weights must be finite and >= 0");
  }
}

Tensor mask_to_tensor(const Mask& m) {
  Tensor t({m.height, m.width});
  for (std::size_t i = 0; i < m.data.size(); ++i) t[i] = m.data[i] ? 1.0 : 0.0;
  return t;
}

Mask threshold_logits(const Tensor& logits, double threshold) {
  if (logits.rank() != 2) throw ShapeError("threshold_logits: expected [H, W] logits");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("threshold must be in (0,1)");
  const double cut = std::log(threshold / (1.0 - threshold));
  Mask m(logits.dim(0), logits.dim(1));
  for (std::size_t i = 0; i < logits.size(); ++i) m.data[i] = logits[i] > cut ? 1 : 0;
  return m;
}

double dice_loss(const Tensor& logits, const Mask& gt) {
  check_mask_shape(logits, gt, "dice_loss");
  ag::Tape tape;
  return dice_loss(tape.constant(logits), mask_to_tensor(gt)).value()[0];
}

ag::Var dice_loss(const ag::Var& logits, const Tensor& gt) {
  require_same_shape(logits.value(), gt, "dice_loss");
  const Tensor& l = logits.value();
  std::vector<double> p(l.size());
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    p[i] = sigmoid(l[i]);
    inter += p[i] * gt[i];
    sp += p[i];
    sg += gt[i];
  }
  const double num = 2.0 * inter + kDiceEpsilon;
  const double den = sp + sg + kDiceEpsilon;
  const auto il = logits.id();
  return logits.tape().record(
      Tensor::scalar(1.0 - num / den), {logits},
      [il, gt, p = std::move(p), num, den](ag::Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        Tensor& d = t.grad(il);
        const double den2 = den * den;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double dl_dp = -(2.0 * gt[i] * den - num) / den2;
          d[i] += g * dl_dp * p[i] * (1.0 - p[i]);
        }
      });
}

double ce_loss(const Tensor& logits, const Mask& gt) {
  check_mask_shape(logits, gt, "ce_loss");
  ag::Tape tape;
  return ce_loss(tape.constant(logits), mask_to_tensor(gt)).value()[0];
}

ag::Var ce_loss(const ag::Var& logits, const Tensor& gt) {
  require_same_shape(logits.value(), gt, "ce_loss");
  const Tensor& l = logits.value();
  double s = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) s += softplus(l[i]) - gt[i] * l[i];
  const double n = static_cast<double>(l.size());
  const auto il = logits.id();
  return logits.tape().record(Tensor::scalar(s / n), {logits}, [il, gt, n](ag::Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / n;
    const Tensor& l = t.value(il);
    Tensor& d = t.grad(il);
    for (std::size_t i = 0; i < l.size(); ++i) d[i] += g * (sigmoid(l[i]) - gt[i]);
  });
}

double iou_target(const Mask& pred, const Mask& gt) {
  check_masks(pred, gt, "iou_target");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    inter += (pred.data[i] && gt.data[i]) ? 1 : 0;
    uni += (pred.data[i] || gt.data[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double mse_loss(double pred, double target) { return (pred - target) * (pred - target); }

ag::Var mse_loss(const ag::Var& pred, double target) {
  if (pred.value().size() != 1) throw ShapeError("mse_loss: prediction must be a scalar");
  const ag::Var diff = ag::sub(pred, pred.tape().constant(Tensor(pred.shape(), target)));
  return ag::reshape(ag::square(diff), {1});
}

LossBreakdown combined_loss(PromptMode mode, double dice, double ce, std::optional<double> mse,
                            const LossWeights& w) {
  w.validate();
  LossBreakdown out;
  out.mode = mode;
  out.dice = dice;
  out.ce = ce;
  if (mode == PromptMode::grid_points) {
    if (!mse) throw ValidationError("grid_points loss requires an mse term");
    out.mse = mse;
    out.total = w.lambda1 * dice + w.lambda2 * ce + w.lambda3 * *mse;
  } else {
    if (mse) throw ValidationError("whole_box loss supervises the mask only; mse not allowed");
    out.total = dice + ce;
  }
  return out;
}

ag::Var combined_loss(PromptMode mode, const ag::Var& dice, const ag::Var& ce, const ag::Var& mse,
                      const LossWeights& w) {
  w.validate();
  if (mode == PromptMode::whole_box) {
    if (mse.valid()) throw ValidationError("whole_box loss supervises the mask only; mse not allowed");
    return ag::add(dice, ce);
  }
  if (!mse.valid()) throw ValidationError("grid_points loss requires an mse term");
  return ag::add(ag::add(ag::scale(dice, w.lambda1), ag::scale(ce, w.lambda2)),
                 ag::scale(mse, w.lambda3));
}

double dice_score(const Mask& pred, const Mask& gt) {
  check_masks(pred, gt, "dice_score");
  std::size_t inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    sp += pred.data[i] ? 1 : 0;
    sg += gt.data[i] ? 1 : 0;
    inter += (pred.data[i] && gt.data[i]) ? 1 : 0;
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

}  // namespace desam
