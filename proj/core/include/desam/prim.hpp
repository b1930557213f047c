// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Prompt-relevant IoU module: a two-way cross-attention transformer over the
// prompt tokens and the final image embedding, plus an IoU regression head.
// There is no mask head. The transformer's image-path output is handed to the
// mask module as the mask embedding.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "desam/autograd.hpp"
#include "desam/nn.hpp"
#include "desam/prompt_engine.hpp"

namespace desam {

struct PrimConfig {
  std::size_t token_dim = 256;
  std::size_t n_layers = 2;
  std::size_t n_heads = 8;
  std::size_t mlp_dim = 2048;
  std::size_t iou_head_depth = 3;

  void validate() const;
};

struct AttentionParams {
  nn::Linear q, k, v, out;

  static AttentionParams create(std::size_t dim, Rng& rng);

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    nn::Linear::visit(self.q, prefix + ".q", f);
    nn::Linear::visit(self.k, prefix + ".k", f);
    nn::Linear::visit(self.v, prefix + ".v", f);
    nn::Linear::visit(self.out, prefix + ".out", f);
  }
};

struct TwoWayLayerParams {
  AttentionParams self_attn;
  nn::Norm norm1;
  AttentionParams token_to_image;
  nn::Norm norm2;
  nn::Linear mlp_in, mlp_out;
  nn::Norm norm3;
  AttentionParams image_to_token;
  nn::Norm norm4;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    AttentionParams::visit(self.self_attn, prefix + ".self_attn", f);
    nn::Norm::visit(self.norm1, prefix + ".norm1", f);
    AttentionParams::visit(self.token_to_image, prefix + ".token_to_image", f);
    nn::Norm::visit(self.norm2, prefix + ".norm2", f);
    nn::Linear::visit(self.mlp_in, prefix + ".mlp_in", f);
    nn::Linear::visit(self.mlp_out, prefix + ".mlp_out", f);
    nn::Norm::visit(self.norm3, prefix + ".norm3", f);
    AttentionParams::visit(self.image_to_token, prefix + ".image_to_token", f);
    nn::Norm::visit(self.norm4, prefix + ".norm4", f);
  }
};

struct PrimParams {
  PrimConfig config;
  Tensor iou_token;  // [1, token_dim]
  std::vector<TwoWayLayerParams> layers;
  AttentionParams final_attn;
  nn::Norm final_norm;
  std::vector<nn::Linear> iou_head;

  static PrimParams create(const PrimConfig& config, std::uint64_t seed);

  /// Calls f(name, tensor) for every parameter in a fixed order.
  template <class F>
  void for_each(F&& f) { visit(*this, f); }
  template <class F>
  void for_each(F&& f) const { visit(*this, f); }

 private:
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f(std::string("prim.iou_token"), self.iou_token);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      TwoWayLayerParams::visit(self.layers[i], "prim.layers." + std::to_string(i), f);
    }
    AttentionParams::visit(self.final_attn, "prim.final_attn", f);
    nn::Norm::visit(self.final_norm, "prim.final_norm", f);
    for (std::size_t i = 0; i < self.iou_head.size(); ++i) {
      nn::Linear::visit(self.iou_head[i], "prim.iou_head." + std::to_string(i), f);
    }
  }
};

struct TwoWayOutput {
  ag::Var tokens;  // [1 + n_tokens, token_dim], iou token first
  ag::Var image;   // [token_dim, grid, grid]
};

/// Multi-head scaled dot-product attention with input and output projections.
ag::Var attention(const ag::Binder& bind, const AttentionParams& p, std::size_t heads,
                  const ag::Var& q, const ag::Var& k, const ag::Var& v);

/// image_emb is [token_dim, grid, grid]. The prompt's dense embedding is added
/// to the image path and its grid positional encoding to every attention
/// input on the image side.
TwoWayOutput two_way_attention(const ag::Binder& bind, const PromptEmbeddings& prompt,
                               const ag::Var& image_emb, const PrimParams& params);

/// The transformer's image-path output, unchanged.
ag::Var extract_mask_embeddings(const ag::Var& image_out);

/// MLP on the IoU token (row 0 of `tokens`); returns a [1, 1] prediction.
ag::Var predict_iou(const ag::Binder& bind, const ag::Var& tokens, const PrimParams& params);

}  // namespace desam
