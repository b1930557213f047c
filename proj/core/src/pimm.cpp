// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/pimm.hpp"

#include <cmath>

#include "desam/error.hpp"

namespace desam {

std::string to_string(UpsampleKind k) {
  return k == UpsampleKind::bilinear ? "bilinear" : "transposed";
}

UpsampleKind parse_upsample_kind(const std::string& s) {
  if (s == "bilinear") return UpsampleKind::bilinear;
  if (s == "transposed") return UpsampleKind::transposed;
  throw FormatError("unknown upsample kind '" + s + "' (expected bilinear or transposed)");
}

void PimmConfig::validate() const {
  if (stage_widths.size() < 1) throw ValidationError("PIMM needs at least one stage width");
  for (auto w : stage_widths) {
    if (w == 0) throw ValidationError("PIMM stage widths must be positive");
  }
  if (se_reduction == 0) throw ValidationError("SE reduction ratio must be >= 1");
}

SEResBlockParams SEResBlockParams::create(std::size_t in, std::size_t out, std::size_t reduction,
                                          Rng& rng) {
  if (reduction == 0) throw ValidationError("SE reduction ratio must be >= 1");
  const std::size_t hidden = std::max<std::size_t>(1, out / reduction);
  SEResBlockParams p;
  p.conv1 = nn::Conv::create(in, out, 3, rng);
  p.norm1 = nn::Norm::create(out);
  p.conv2 = nn::Conv::create(out, out, 3, rng);
  p.se_reduce = nn::Linear::create(out, hidden, rng);
  p.se_expand = nn::Linear::create(hidden, out, rng);
  if (in != out) p.proj = nn::Conv::create(in, out, 1, rng);
  return p;
}

PimmParams PimmParams::create(const PimmConfig& config, const EncoderSpec& encoder,
                              std::size_t mask_channels, std::uint64_t seed) {
  config.validate();
  encoder.validate();
  const std::size_t n_taps = encoder.tap_layers.size();
  if (config.stage_widths.size() != n_taps + 1) {
    throw ValidationError("PIMM needs " + std::to_string(n_taps + 1) + " stage widths for " +
                          std::to_string(n_taps) + " tap layers, got " +
                          std::to_string(config.stage_widths.size()));
  }
  Rng rng(Rng::mix(seed, 0x50494d4dull));
  const auto& w = config.stage_widths;
  PimmParams p;
  p.config = config;
  p.bottleneck_proj = nn::Conv::create(encoder.final_channels, w[0], 1, rng);
  p.fusion_proj = nn::Conv::create(mask_channels, w[0], 1, rng);
  for (std::size_t b = 0; b < config.blocks_per_stage; ++b) {
    p.bottleneck_blocks.push_back(SEResBlockParams::create(w[0], w[0], config.se_reduction, rng));
  }
  for (std::size_t s = 0; s < n_taps; ++s) {
    PimmStage st;
    if (config.upsample == UpsampleKind::bilinear) {
      st.up_conv = nn::Conv::create(w[s], w[s + 1], 3, rng);
    } else {
      st.up_weight = Tensor({w[s], w[s + 1], 2, 2});
      st.up_bias = Tensor({w[s + 1]});
      const double bound = 1.0 / std::sqrt(static_cast<double>(w[s] * 4));
      for (auto& v : st.up_weight.data()) v = rng.uniform(-bound, bound);
      st.up_weight.round_to_float();
    }
    st.skip_proj = nn::Conv::create(encoder.tap_channels, w[s + 1], 1, rng);
    for (std::size_t b = 0; b < config.blocks_per_stage; ++b) {
      st.blocks.push_back(SEResBlockParams::create(w[s + 1], w[s + 1], config.se_reduction, rng));
    }
    p.stages.push_back(std::move(st));
  }
  p.head = nn::Conv::create(w.back(), 1, 1, rng);
  return p;
}

Tensor to_tensor(const FeatureMap& m) {
  Tensor t({m.channels, m.height, m.width});
  for (std::size_t i = 0; i < m.data.size(); ++i) t[i] = static_cast<double>(m.data[i]);
  return t;
}

ag::Var se_res_block(const ag::Binder& bind, const ag::Var& x, const SEResBlockParams& p) {
  if (x.value().rank() != 3 || x.dim(0) != p.conv1.in_channels()) {
    throw ShapeError("se_res_block: input " + shape_string(x.shape()) + " but block expects " +
                     std::to_string(p.conv1.in_channels()) + " channels");
  }
  const std::size_t c = p.conv1.out_channels();
  ag::Var u = p.conv1(bind, x);
  u = ag::group_norm(u, nn::norm_groups(c), bind(p.norm1.gamma), bind(p.norm1.beta));
  u = p.conv2(bind, ag::relu(u));

  ag::Var s = ag::reshape(ag::global_avg_pool(u), {1, c});
  s = ag::relu(p.se_reduce(bind, s));
  s = ag::sigmoid(p.se_expand(bind, s));
  u = ag::scale_channels(u, ag::reshape(s, {c}));

  const ag::Var shortcut = p.proj ? (*p.proj)(bind, x) : x;
  return ag::add(shortcut, u);
}

ag::Var fuse_bottleneck(const ag::Binder& bind, const ag::Var& bottleneck, const ag::Var& mask_emb,
                        const nn::Conv& fusion_proj) {
  if (bottleneck.value().rank() != 3 || mask_emb.value().rank() != 3 ||
      bottleneck.dim(1) != mask_emb.dim(1) || bottleneck.dim(2) != mask_emb.dim(2)) {
    throw ShapeError("fuse_bottleneck: bottleneck " + shape_string(bottleneck.shape()) +
                     " and mask embedding " + shape_string(mask_emb.shape()) +
                     " are on different grids");
  }
  return ag::add(bottleneck, fusion_proj(bind, mask_emb));
}

ag::Var decode_mask(const ag::Binder& bind, const std::vector<ag::Var>& taps, const ag::Var& final,
                    const ag::Var& mask_emb, const PimmParams& params, std::size_t image_size,
                    const ag::Binder* fusion_bind) {
  if (taps.size() != params.stages.size()) {
    throw ShapeError("decode_mask: " + std::to_string(taps.size()) + " tap embeddings for " +
                     std::to_string(params.stages.size()) + " decoder stages");
  }
  if (final.value().rank() != 3 || final.dim(0) != params.bottleneck_proj.in_channels()) {
    throw ShapeError("decode_mask: final embedding " + shape_string(final.shape()) +
                     " does not match the encoder spec this decoder was built for");
  }
  ag::Var x = params.bottleneck_proj(bind, final);
  if (mask_emb.valid()) {
    x = fuse_bottleneck(fusion_bind ? *fusion_bind : bind, x, mask_emb, params.fusion_proj);
  }
  for (const auto& b : params.bottleneck_blocks) x = se_res_block(bind, x, b);

  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    const auto& st = params.stages[s];
    const std::size_t h = x.dim(1) * 2, w = x.dim(2) * 2;
    if (params.config.upsample == UpsampleKind::bilinear) {
      x = st.up_conv(bind, ag::bilinear_resize(x, h, w));
    } else {
      x = ag::conv_transpose2x2(x, bind(st.up_weight), bind(st.up_bias));
    }
    const ag::Var& tap = taps[taps.size() - 1 - s];
    if (tap.dim(0) != st.skip_proj.in_channels()) {
      throw ShapeError("decode_mask: tap embedding has " + std::to_string(tap.dim(0)) +
                       " channels, decoder expects " + std::to_string(st.skip_proj.in_channels()));
    }
    x = ag::add(x, ag::bilinear_resize(st.skip_proj(bind, tap), h, w));
    for (const auto& b : st.blocks) x = se_res_block(bind, x, b);
  }

  x = ag::bilinear_resize(x, image_size, image_size);
  return ag::reshape(params.head(bind, x), {image_size, image_size});
}

Tensor decode_mask(const ImageEmbeddingSet& embeddings, const Tensor& mask_emb,
                   const PimmParams& params, std::size_t image_size) {
  ag::Tape tape;
  ag::Binder bind(tape, false);
  std::vector<ag::Var> taps;
  for (const auto& t : embeddings.taps) taps.push_back(tape.constant(to_tensor(t)));
  const ag::Var final = tape.constant(to_tensor(embeddings.final));
  const ag::Var me = mask_emb.empty() ? ag::Var{} : tape.constant(mask_emb);
  return decode_mask(bind, taps, final, me, params, image_size).value();
}

}  // namespace desam
