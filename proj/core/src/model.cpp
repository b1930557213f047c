// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/model.hpp"

#include <limits>

#include "desam/error.hpp"

namespace desam {

std::string to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::full: return "full";
    case AblationVariant::pimm_only: return "pimm_only";
    case AblationVariant::no_iou_head: return "no_iou_head";
    case AblationVariant::no_mask_fusion: return "no_mask_fusion";
  }
  return "full";
}

AblationVariant parse_ablation_variant(const std::string& s) {
  if (s == "full") return AblationVariant::full;
  if (s == "pimm_only") return AblationVariant::pimm_only;
  if (s == "no_iou_head") return AblationVariant::no_iou_head;
  if (s == "no_mask_fusion") return AblationVariant::no_mask_fusion;
  throw FormatError("unknown ablation variant '" + s +
                    "' (expected pimm_only, no_iou_head, no_mask_fusion or full)");
}

EmbeddingTensors EmbeddingTensors::from(const ImageEmbeddingSet& e) {
  EmbeddingTensors t;
  for (const auto& m : e.taps) t.taps.push_back(to_tensor(m));
  t.final = to_tensor(e.final);
  return t;
}

DesamModel DesamModel::create(const ModelConfig& config, const EncoderSpec& encoder,
                              std::uint64_t seed) {
  encoder.validate();
  config.prim.validate();
  if (encoder.final_channels != config.prim.token_dim) {
    throw ValidationError("encoder final_channels (" + std::to_string(encoder.final_channels) +
                          ") must equal token_dim (" + std::to_string(config.prim.token_dim) + ")");
  }
  if (config.image_size == 0) throw ValidationError("image_size must be positive");
  DesamModel m;
  m.config = config;
  m.encoder = encoder;
  m.prompt = FrozenPromptParams::create(config.prim.token_dim, Rng::mix(seed, 1));
  m.prim = PrimParams::create(config.prim, Rng::mix(seed, 2));
  m.pimm = PimmParams::create(config.pimm, encoder, config.prim.token_dim, Rng::mix(seed, 3));
  if (config.variant == AblationVariant::no_mask_fusion) {
    m.pimm.fusion_proj.weight.fill(0.0);
    m.pimm.fusion_proj.bias.fill(0.0);
  }
  return m;
}

ForwardResult forward(const ag::Binder& bind, const DesamModel& model, const EmbeddingTensors& emb,
                      const PromptEmbeddings& prompt) {
  auto& tape = bind.tape();
  const ag::Binder frozen = bind.frozen();
  std::vector<ag::Var> taps;
  taps.reserve(emb.taps.size());
  for (const auto& t : emb.taps) taps.push_back(tape.constant(t));
  const ag::Var final = tape.constant(emb.final);

  ForwardResult out;
  ag::Var mask_emb;
  if (model.uses_prim()) {
    const auto two_way = two_way_attention(bind, prompt, final, model.prim);
    mask_emb = extract_mask_embeddings(two_way.image);
    if (model.uses_iou_head()) {
      out.iou = predict_iou(bind, two_way.tokens, model.prim);
    }
  }
  const bool fusion_trainable = model.config.variant == AblationVariant::full ||
                                model.config.variant == AblationVariant::no_iou_head;
  out.logits = decode_mask(bind, taps, final, mask_emb, model.pimm, model.config.image_size,
                           fusion_trainable ? &bind : &frozen);
  return out;
}

InstanceOutput infer(const DesamModel& model, const EmbeddingTensors& emb, const PromptSet& prompts) {
  ag::Tape tape;
  const ag::Binder bind(tape, false);
  const auto pe = encode_prompts(prompts, model.prompt, model.encoder.grid);
  auto r = forward(bind, model, emb, pe);
  InstanceOutput out;
  out.logits = r.logits.value();
  out.iou = r.iou.valid() ? r.iou.value()[0] : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace desam
