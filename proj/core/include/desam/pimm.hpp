// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Prompt-invariant mask module: an encoder-decoder over the frozen multi-scale
// image embeddings. The final embedding is projected into a bottleneck that
// absorbs the PRIM mask embedding; each decoder stage runs a stack of
// squeeze-and-excitation residual blocks, upsamples 2x and adds a projected
// skip from one tap embedding (deepest tap first). A 1x1 head emits logits at
// image resolution.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "desam/autograd.hpp"
#include "desam/encoder_cache.hpp"
#include "desam/nn.hpp"

namespace desam {

enum class UpsampleKind { bilinear, transposed };

std::string to_string(UpsampleKind k);
UpsampleKind parse_upsample_kind(const std::string& s);

struct SEResBlockParams {
  nn::Conv conv1;
  nn::Norm norm1;
  nn::Conv conv2;
  nn::Linear se_reduce;
  nn::Linear se_expand;
  std::optional<nn::Conv> proj;  // 1x1, present when in != out channels

  static SEResBlockParams create(std::size_t in, std::size_t out, std::size_t reduction, Rng& rng);

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    nn::Conv::visit(self.conv1, prefix + ".conv1", f);
    nn::Norm::visit(self.norm1, prefix + ".norm1", f);
    nn::Conv::visit(self.conv2, prefix + ".conv2", f);
    nn::Linear::visit(self.se_reduce, prefix + ".se_reduce", f);
    nn::Linear::visit(self.se_expand, prefix + ".se_expand", f);
    if (self.proj) nn::Conv::visit(*self.proj, prefix + ".proj", f);
  }
};

struct PimmConfig {
  std::vector<std::size_t> stage_widths{256, 128, 64, 32};
  std::size_t blocks_per_stage = 2;
  std::size_t se_reduction = 16;
  UpsampleKind upsample = UpsampleKind::bilinear;

  void validate() const;
};

struct PimmStage {
  nn::Conv up_conv;             // 3x3 after bilinear upsampling ([out,in,3,3])
  Tensor up_weight, up_bias;    // transposed 2x2 ([in,out,2,2]) when selected
  nn::Conv skip_proj;           // 1x1 tap projection to the stage width
  std::vector<SEResBlockParams> blocks;
};

struct PimmParams {
  PimmConfig config;
  nn::Conv bottleneck_proj;  // 1x1, final embedding -> stage_widths[0]
  nn::Conv fusion_proj;      // 1x1, mask embedding -> stage_widths[0]
  std::vector<SEResBlockParams> bottleneck_blocks;
  std::vector<PimmStage> stages;  // one per tap
  nn::Conv head;                  // 1x1, last width -> 1

  static PimmParams create(const PimmConfig& config, const EncoderSpec& encoder,
                           std::size_t mask_channels, std::uint64_t seed);

  template <class F>
  void for_each(F&& f) { visit(*this, f); }
  template <class F>
  void for_each(F&& f) const { visit(*this, f); }

 private:
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    nn::Conv::visit(self.bottleneck_proj, "pimm.bottleneck_proj", f);
    nn::Conv::visit(self.fusion_proj, "pimm.fusion_proj", f);
    for (std::size_t b = 0; b < self.bottleneck_blocks.size(); ++b) {
      SEResBlockParams::visit(self.bottleneck_blocks[b], "pimm.bottleneck.block" + std::to_string(b), f);
    }
    for (std::size_t s = 0; s < self.stages.size(); ++s) {
      auto& st = self.stages[s];
      const std::string pre = "pimm.stage" + std::to_string(s);
      if (self.config.upsample == UpsampleKind::bilinear) {
        nn::Conv::visit(st.up_conv, pre + ".up_conv", f);
      } else {
        f(pre + ".up.weight", st.up_weight);
        f(pre + ".up.bias", st.up_bias);
      }
      nn::Conv::visit(st.skip_proj, pre + ".skip_proj", f);
      for (std::size_t b = 0; b < st.blocks.size(); ++b) {
        SEResBlockParams::visit(st.blocks[b], pre + ".block" + std::to_string(b), f);
      }
    }
    nn::Conv::visit(self.head, "pimm.head", f);
  }
};

/// Converts a float feature map to a [C,H,W] tensor.
Tensor to_tensor(const FeatureMap& m);

/// y = proj(x) + SE(conv2(relu(norm(conv1(x))))), SE being channel gating by
/// sigmoid(expand(relu(reduce(avgpool(u))))).
ag::Var se_res_block(const ag::Binder& bind, const ag::Var& x, const SEResBlockParams& p);

/// bottleneck + fusion_proj(mask_emb). `bind` decides whether the projection
/// is trainable.
ag::Var fuse_bottleneck(const ag::Binder& bind, const ag::Var& bottleneck, const ag::Var& mask_emb,
                        const nn::Conv& fusion_proj);

/// Full decoder. `mask_emb` may be invalid, in which case the fusion path is
/// skipped. `fusion_bind` (defaults to `bind`) binds the fusion projection.
/// Returns [image_size, image_size] logits.
ag::Var decode_mask(const ag::Binder& bind, const std::vector<ag::Var>& taps, const ag::Var& final,
                    const ag::Var& mask_emb, const PimmParams& params, std::size_t image_size,
                    const ag::Binder* fusion_bind = nullptr);

/// Inference convenience: embeddings and an optional [C,g,g] mask embedding
/// (empty tensor for none) to logits.
Tensor decode_mask(const ImageEmbeddingSet& embeddings, const Tensor& mask_emb,
                   const PimmParams& params, std::size_t image_size);

}  // namespace desam
