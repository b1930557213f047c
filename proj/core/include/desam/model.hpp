// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// The decoupled decoder: frozen prompt encoder, PRIM and PIMM wired together
// for one prompt instance, with the ablation variants as wiring switches.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "desam/autograd.hpp"
#include "desam/encoder_cache.hpp"
#include "desam/pimm.hpp"
#include "desam/prim.hpp"
#include "desam/prompt_engine.hpp"

namespace desam {

/// pimm_only: the mask embedding path is cut and PRIM is unused.
/// no_iou_head: no IoU supervision; the mask embedding is still fused.
/// no_mask_fusion: the fusion projection is zero and frozen; IoU supervision stays.
enum class AblationVariant { full, pimm_only, no_iou_head, no_mask_fusion };

std::string to_string(AblationVariant v);
AblationVariant parse_ablation_variant(const std::string& s);

struct ModelConfig {
  std::size_t image_size = kDefaultImageSize;
  PrimConfig prim;
  PimmConfig pimm;
  AblationVariant variant = AblationVariant::full;
};

/// Embeddings widened to 64-bit tensors once per sample.
struct EmbeddingTensors {
  std::vector<Tensor> taps;
  Tensor final;

  static EmbeddingTensors from(const ImageEmbeddingSet& e);
};

struct DesamModel {
  ModelConfig config;
  EncoderSpec encoder;
  FrozenPromptParams prompt;
  PrimParams prim;
  PimmParams pimm;

  /// Seeded initialization. Requires encoder.final_channels == token_dim and
  /// one more stage width than tap layers.
  static DesamModel create(const ModelConfig& config, const EncoderSpec& encoder,
                           std::uint64_t seed);

  bool uses_prim() const { return config.variant != AblationVariant::pimm_only; }
  bool uses_iou_head() const {
    return config.variant == AblationVariant::full ||
           config.variant == AblationVariant::no_mask_fusion;
  }

  /// f(name, tensor, trainable) over every parameter, frozen ones included,
  /// in a fixed order.
  template <class F>
  void for_each(F&& f) { visit(*this, f); }
  template <class F>
  void for_each(F&& f) const { visit(*this, f); }

 private:
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f(std::string("prompt.frequencies"), self.prompt.frequencies, false);
    f(std::string("prompt.label_embeddings"), self.prompt.label_embeddings, false);
    f(std::string("prompt.corner_embeddings"), self.prompt.corner_embeddings, false);
    f(std::string("prompt.no_mask_embedding"), self.prompt.no_mask_embedding, false);
    const bool prim_on = self.uses_prim();
    const bool head_on = self.uses_iou_head();
    self.prim.for_each([&](const std::string& name, auto& t) {
      const bool is_head = name.rfind("prim.iou_head", 0) == 0;
      f(name, t, prim_on && (head_on || !is_head));
    });
    const bool fusion_on = self.config.variant == AblationVariant::full ||
                           self.config.variant == AblationVariant::no_iou_head;
    self.pimm.for_each([&](const std::string& name, auto& t) {
      const bool is_fusion = name.rfind("pimm.fusion_proj", 0) == 0;
      f(name, t, fusion_on || !is_fusion);
    });
  }
};

struct ForwardResult {
  ag::Var logits;  // [S, S]
  ag::Var iou;     // [1, 1]; invalid when the variant has no IoU head
};

/// One prompt instance. With a trainable binder, trainable parameters become
/// tape leaves; frozen ones are bound as constants either way.
ForwardResult forward(const ag::Binder& bind, const DesamModel& model, const EmbeddingTensors& emb,
                      const PromptEmbeddings& prompt);

/// Inference helper: logits and the IoU prediction (NaN when absent).
struct InstanceOutput {
  Tensor logits;
  double iou = 0.0;
};
InstanceOutput infer(const DesamModel& model, const EmbeddingTensors& emb, const PromptSet& prompts);

}  // namespace desam
