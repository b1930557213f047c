// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/prompt_engine.hpp"

#include <cmath>
#include <numbers>

#include "desam/error.hpp"

namespace desam {

std::string to_string(PromptMode mode) {
  return mode == PromptMode::grid_points ? "grid_points" : "whole_box";
}

PromptMode parse_prompt_mode(const std::string& s) {
  if (s == "grid_points") return PromptMode::grid_points;
  if (s == "whole_box") return PromptMode::whole_box;
  throw FormatError("unknown prompt mode '" + s + "' (expected grid_points or whole_box)");
}

void PromptSet::validate() const {
  if (image_size == 0) throw ValidationError("prompt set has zero image size");
  const double s = static_cast<double>(image_size);
  auto in_bounds = [s](double v) { return v >= 0.0 && v <= s; };
  for (const auto& p : points) {
    if (!in_bounds(p.x) || !in_bounds(p.y)) {
      throw ValidationError("point prompt (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                            ") outside the image");
    }
  }
  for (const auto& b : boxes) {
    if (!in_bounds(b.x0) || !in_bounds(b.y0) || !in_bounds(b.x1) || !in_bounds(b.y1)) {
      throw ValidationError("box prompt outside the image");
    }
    if (!(b.x0 < b.x1 && b.y0 < b.y1)) throw ValidationError("degenerate box prompt");
  }
  if (mode == PromptMode::whole_box && (boxes.size() != 1 || !points.empty())) {
    throw ValidationError("whole_box prompts hold exactly one box and no points");
  }
  if (mode == PromptMode::grid_points && (points.empty() || !boxes.empty())) {
    throw ValidationError("grid_points prompts hold at least one point and no boxes");
  }
}

PromptSet grid_points(std::size_t n_per_side, std::size_t image_size) {
  if (n_per_side == 0 || image_size == 0) {
    throw ValidationError("grid_points needs n_per_side >= 1 and image_size >= 1");
  }
  PromptSet ps;
  ps.mode = PromptMode::grid_points;
  ps.image_size = image_size;
  const double n = static_cast<double>(n_per_side);
  const double s = static_cast<double>(image_size);
  for (std::size_t j = 0; j < n_per_side; ++j)
    for (std::size_t i = 0; i < n_per_side; ++i) {
      ps.points.push_back({(static_cast<double>(i) + 0.5) / n * s,
                           (static_cast<double>(j) + 0.5) / n * s, PointLabel::positive});
    }
  return ps;
}

PromptSet sample_training_points(const Mask& mask, std::size_t n_pos, std::size_t n_neg, Rng& rng) {
  if (mask.height != mask.width || mask.height == 0) {
    throw ValidationError("training point sampler expects a non-empty square mask");
  }
  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < mask.data.size(); ++i) (mask.data[i] ? fg : bg).push_back(i);
  if (n_pos > 0 && fg.empty()) throw ValidationError("cannot sample positive points: empty mask");
  if (n_neg > 0 && bg.empty()) throw ValidationError("cannot sample negative points: no background");

  PromptSet ps;
  ps.mode = PromptMode::grid_points;
  ps.image_size = mask.width;
  auto draw = [&](const std::vector<std::size_t>& pool, PointLabel label) {
    const auto idx = pool[rng.below(pool.size())];
    ps.points.push_back({static_cast<double>(idx % mask.width) + 0.5,
                         static_cast<double>(idx / mask.width) + 0.5, label});
  };
  for (std::size_t i = 0; i < n_pos; ++i) draw(fg, PointLabel::positive);
  for (std::size_t i = 0; i < n_neg; ++i) draw(bg, PointLabel::negative);
  return ps;
}

PromptSet whole_image_box(std::size_t image_size) {
  if (image_size == 0) throw ValidationError("whole_image_box needs image_size >= 1");
  PromptSet ps;
  ps.mode = PromptMode::whole_box;
  ps.image_size = image_size;
  const double s = static_cast<double>(image_size);
  ps.boxes.push_back({0.0, 0.0, s, s});
  return ps;
}

FrozenPromptParams FrozenPromptParams::create(std::size_t token_dim, std::uint64_t seed) {
  if (token_dim == 0 || token_dim % 2 != 0) {
    throw ValidationError("prompt token_dim must be positive and even");
  }
  Rng rng(Rng::mix(seed, 0x50524f4dull));
  FrozenPromptParams p;
  p.frequencies = Tensor({token_dim / 2, 2});
  for (auto& v : p.frequencies.data()) v = rng.normal();
  p.label_embeddings = Tensor({2, token_dim});
  for (auto& v : p.label_embeddings.data()) v = rng.normal();
  p.corner_embeddings = Tensor({2, token_dim});
  for (auto& v : p.corner_embeddings.data()) v = rng.normal();
  p.no_mask_embedding = Tensor({token_dim});
  for (auto& v : p.no_mask_embedding.data()) v = rng.normal() * 0.1;
  // Frozen values live in float32 checkpoints; keep them exactly representable.
  p.frequencies.round_to_float();
  p.label_embeddings.round_to_float();
  p.corner_embeddings.round_to_float();
  p.no_mask_embedding.round_to_float();
  return p;
}

std::vector<double> positional_encoding(const FrozenPromptParams& params, double u, double v) {
  const std::size_t half = params.frequencies.dim(0);
  std::vector<double> out(2 * half);
  const double cu = 2.0 * u - 1.0, cv = 2.0 * v - 1.0;
  for (std::size_t j = 0; j < half; ++j) {
    const double a = 2.0 * std::numbers::pi *
                     (params.frequencies.at(j, 0) * cu + params.frequencies.at(j, 1) * cv);
    out[j] = std::sin(a);
    out[half + j] = std::cos(a);
  }
  return out;
}

PromptEmbeddings encode_prompts(const PromptSet& prompts, const FrozenPromptParams& params,
                                std::size_t grid) {
  prompts.validate();
  if (grid == 0) throw ValidationError("encode_prompts needs grid >= 1");
  const std::size_t d = params.token_dim();
  const double s = static_cast<double>(prompts.image_size);
  const std::size_t n = prompts.points.size() + 2 * prompts.boxes.size();

  PromptEmbeddings out;
  out.tokens = Tensor({n, d});
  std::size_t row = 0;
  auto put = [&](const std::vector<double>& pe, const Tensor& table, std::size_t which) {
    for (std::size_t k = 0; k < d; ++k) out.tokens.at(row, k) = pe[k] + table.at(which, k);
    ++row;
  };
  for (const auto& p : prompts.points) {
    put(positional_encoding(params, p.x / s, p.y / s), params.label_embeddings,
        static_cast<std::size_t>(p.label));
  }
  for (const auto& b : prompts.boxes) {
    put(positional_encoding(params, b.x0 / s, b.y0 / s), params.corner_embeddings, 0);
    put(positional_encoding(params, b.x1 / s, b.y1 / s), params.corner_embeddings, 1);
  }

  out.dense_embedding = Tensor({d, grid, grid});
  out.image_pe = Tensor({d, grid, grid});
  const double g = static_cast<double>(grid);
  for (std::size_t y = 0; y < grid; ++y)
    for (std::size_t x = 0; x < grid; ++x) {
      const auto pe = positional_encoding(params, (static_cast<double>(x) + 0.5) / g,
                                          (static_cast<double>(y) + 0.5) / g);
      for (std::size_t k = 0; k < d; ++k) {
        out.image_pe.at(k, y, x) = pe[k];
        out.dense_embedding.at(k, y, x) = params.no_mask_embedding[k];
      }
    }
  return out;
}

}  // namespace desam
