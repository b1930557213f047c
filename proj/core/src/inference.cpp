// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/inference.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "desam/error.hpp"

namespace desam {

std::string to_string(MergeKind k) {
  switch (k) {
    case MergeKind::mean_probability: return "mean_probability";
    case MergeKind::max_probability: return "max_probability";
    case MergeKind::union_binary: return "union_binary";
    case MergeKind::iou_weighted: return "iou_weighted";
  }
  return "mean_probability";
}

MergeKind parse_merge_kind(const std::string& s) {
  if (s == "mean_probability" || s == "mean") return MergeKind::mean_probability;
  if (s == "max_probability" || s == "max") return MergeKind::max_probability;
  if (s == "union_binary" || s == "union") return MergeKind::union_binary;
  if (s == "iou_weighted") return MergeKind::iou_weighted;
  throw FormatError("unknown merge strategy '" + s +
                    "' (expected mean_probability, max_probability, union_binary or iou_weighted)");
}

void MergeStrategy::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ValidationError("merge threshold must be in (0,1), got " + std::to_string(threshold));
  }
}

namespace {

Tensor sigmoid_map(const Tensor& logits) {
  Tensor p = logits;
  for (auto& v : p.data()) v = 1.0 / (1.0 + std::exp(-v));
  return p;
}

}  // namespace

PromptOutputs run_prompts(const DesamModel& model, const EmbeddingTensors& emb,
                          const PromptSet& prompts) {
  prompts.validate();
  if (prompts.image_size != model.config.image_size) {
    throw ValidationError("prompt image size " + std::to_string(prompts.image_size) +
                          " does not match the model's " + std::to_string(model.config.image_size));
  }
  PromptOutputs out;
  auto push = [&](const PromptSet& ps) {
    auto r = infer(model, emb, ps);
    out.probabilities.push_back(sigmoid_map(r.logits));
    out.ious.push_back(r.iou);
  };
  if (prompts.mode == PromptMode::whole_box || !model.uses_prim()) {
    // Without PRIM the output ignores the prompt, so one pass stands for all.
    push(prompts);
    return out;
  }
  for (const auto& pt : prompts.points) {
    PromptSet single;
    single.mode = PromptMode::grid_points;
    single.image_size = prompts.image_size;
    single.points.push_back(pt);
    push(single);
  }
  return out;
}

Mask merge_predictions(const std::vector<Tensor>& probabilities, const std::vector<double>& ious,
                       const MergeStrategy& merge) {
  merge.validate();
  if (probabilities.empty()) throw ValidationError("merge_predictions: no probability maps");
  const Tensor& first = probabilities.front();
  if (first.rank() != 2) throw ShapeError("merge_predictions: maps must be [H, W]");
  for (const auto& p : probabilities) require_same_shape(first, p, "merge_predictions");
  const std::size_t n = probabilities.size();

  std::vector<double> w(n, 1.0);
  if (merge.kind == MergeKind::iou_weighted) {
    if (ious.size() != n) throw ValidationError("merge_predictions: one IoU per map required");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = std::isfinite(ious[i]) ? std::max(ious[i], 0.0) : 0.0;
      total += w[i];
    }
    if (!(total > 0.0)) std::fill(w.begin(), w.end(), 1.0);
  }

  Mask m(first.dim(0), first.dim(1));
  // Per-pixel values are sorted before summing so the result does not depend
  // on prompt order.
  std::vector<std::pair<double, double>> vals(n);
  for (std::size_t px = 0; px < first.size(); ++px) {
    bool on = false;
    switch (merge.kind) {
      case MergeKind::max_probability: {
        double best = 0.0;
        for (const auto& p : probabilities) best = std::max(best, p[px]);
        on = best > merge.threshold;
        break;
      }
      case MergeKind::union_binary:
        for (const auto& p : probabilities) on = on || p[px] > merge.threshold;
        break;
      case MergeKind::mean_probability:
      case MergeKind::iou_weighted: {
        for (std::size_t i = 0; i < n; ++i) vals[i] = {probabilities[i][px], w[i]};
        std::sort(vals.begin(), vals.end());
        double num = 0.0, den = 0.0;
        for (const auto& [p, wi] : vals) {
          num += wi * p;
          den += wi;
        }
        on = num / den > merge.threshold;
        break;
      }
    }
    m.data[px] = on ? 1 : 0;
  }
  return m;
}

Mask predict_mask(const DesamModel& model, PromptMode mode, const EmbeddingTensors& emb,
                  std::size_t eval_grid, const MergeStrategy& merge) {
  const std::size_t s = model.config.image_size;
  const PromptSet prompts =
      mode == PromptMode::whole_box ? whole_image_box(s) : grid_points(eval_grid, s);
  const auto out = run_prompts(model, emb, prompts);
  return merge_predictions(out.probabilities, out.ious, merge);
}

}  // namespace desam
