// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Automatic prompts (grid lattice, whole-image box, training point samples)
// and the frozen prompt encoder.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "desam/dataset_io.hpp"
#include "desam/random.hpp"
#include "desam/tensor.hpp"

namespace desam {

enum class PromptMode { grid_points, whole_box };

std::string to_string(PromptMode mode);
PromptMode parse_prompt_mode(const std::string& s);

enum class PointLabel : std::uint8_t { negative = 0, positive = 1 };

struct PointPrompt {
  double x = 0.0;
  double y = 0.0;
  PointLabel label = PointLabel::positive;
};

struct BoxPrompt {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
};

/// Coordinates are pixels in [0, image_size].
struct PromptSet {
  PromptMode mode = PromptMode::grid_points;
  std::size_t image_size = 0;
  std::vector<PointPrompt> points;
  std::vector<BoxPrompt> boxes;

  void validate() const;
};

/// n_per_side^2 positive points at ((i + 0.5) / n) * S, row-major.
PromptSet grid_points(std::size_t n_per_side, std::size_t image_size);

/// Exactly n_pos points on mask pixels (positive) and n_neg on background
/// pixels (negative), placed at pixel centres. Positives come first.
PromptSet sample_training_points(const Mask& mask, std::size_t n_pos, std::size_t n_neg, Rng& rng);

/// Box (0, 0, S, S).
PromptSet whole_image_box(std::size_t image_size);

/// Fixed at construction; training never updates these.
struct FrozenPromptParams {
  Tensor frequencies;        // [token_dim/2, 2] random Fourier frequencies
  Tensor label_embeddings;   // [2, token_dim]: row 0 negative, row 1 positive
  Tensor corner_embeddings;  // [2, token_dim]: top-left, bottom-right
  Tensor no_mask_embedding;  // [token_dim], broadcast as the dense embedding

  static FrozenPromptParams create(std::size_t token_dim, std::uint64_t seed);
  std::size_t token_dim() const { return no_mask_embedding.size(); }

  friend bool operator==(const FrozenPromptParams&, const FrozenPromptParams&) = default;
};

struct PromptEmbeddings {
  Tensor tokens;           // [n_tokens, token_dim]
  Tensor dense_embedding;  // [token_dim, grid, grid]
  Tensor image_pe;         // [token_dim, grid, grid], positional encoding of grid cells
};

/// Sinusoidal encoding of a normalized coordinate pair in [0,1]^2.
std::vector<double> positional_encoding(const FrozenPromptParams& params, double u, double v);

/// One token per point, two per box (corner tokens), in that order.
PromptEmbeddings encode_prompts(const PromptSet& prompts, const FrozenPromptParams& params,
                                std::size_t grid);

}  // namespace desam
