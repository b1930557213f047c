// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/prim.hpp"

#include <cmath>

#include "desam/error.hpp"

namespace desam {

void PrimConfig::validate() const {
  if (token_dim == 0 || n_heads == 0 || token_dim % n_heads != 0) {
    throw ValidationError("token_dim (" + std::to_string(token_dim) +
                          ") must be a positive multiple of n_heads (" + std::to_string(n_heads) +
                          ")");
  }
  if (token_dim % 2 != 0) throw ValidationError("token_dim must be even");
  if (mlp_dim == 0) throw ValidationError("mlp_dim must be positive");
  if (iou_head_depth == 0) throw ValidationError("iou_head_depth must be positive");
}

AttentionParams AttentionParams::create(std::size_t dim, Rng& rng) {
  return {nn::Linear::create(dim, dim, rng), nn::Linear::create(dim, dim, rng),
          nn::Linear::create(dim, dim, rng), nn::Linear::create(dim, dim, rng)};
}

PrimParams PrimParams::create(const PrimConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(Rng::mix(seed, 0x5052494dull));
  const std::size_t d = config.token_dim;
  PrimParams p;
  p.config = config;
  p.iou_token = Tensor({1, d});
  for (auto& v : p.iou_token.data()) v = rng.normal();
  p.iou_token.round_to_float();
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    TwoWayLayerParams l;
    l.self_attn = AttentionParams::create(d, rng);
    l.norm1 = nn::Norm::create(d);
    l.token_to_image = AttentionParams::create(d, rng);
    l.norm2 = nn::Norm::create(d);
    l.mlp_in = nn::Linear::create(d, config.mlp_dim, rng);
    l.mlp_out = nn::Linear::create(config.mlp_dim, d, rng);
    l.norm3 = nn::Norm::create(d);
    l.image_to_token = AttentionParams::create(d, rng);
    l.norm4 = nn::Norm::create(d);
    p.layers.push_back(std::move(l));
  }
  p.final_attn = AttentionParams::create(d, rng);
  p.final_norm = nn::Norm::create(d);
  for (std::size_t i = 0; i < config.iou_head_depth; ++i) {
    const bool last = i + 1 == config.iou_head_depth;
    p.iou_head.push_back(nn::Linear::create(d, last ? 1 : d, rng));
  }
  return p;
}

ag::Var attention(const ag::Binder& bind, const AttentionParams& p, std::size_t heads,
                  const ag::Var& q_in, const ag::Var& k_in, const ag::Var& v_in) {
  const ag::Var q = p.q(bind, q_in);
  const ag::Var k = p.k(bind, k_in);
  const ag::Var v = p.v(bind, v_in);
  const std::size_t dim = q.dim(1);
  const std::size_t dh = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ag::Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = ag::slice_cols(q, h * dh, dh);
    const auto kh = ag::slice_cols(k, h * dh, dh);
    const auto vh = ag::slice_cols(v, h * dh, dh);
    const auto w = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt));
    outs.push_back(ag::matmul(w, vh));
  }
  return p.out(bind, heads == 1 ? outs[0] : ag::concat_cols(outs));
}

namespace {

ag::Var norm(const ag::Binder& bind, const nn::Norm& n, const ag::Var& x) {
  return ag::layer_norm_rows(x, bind(n.gamma), bind(n.beta));
}

}  // namespace

TwoWayOutput two_way_attention(const ag::Binder& bind, const PromptEmbeddings& prompt,
                               const ag::Var& image_emb, const PrimParams& params) {
  const auto& cfg = params.config;
  const std::size_t d = cfg.token_dim;
  if (image_emb.value().rank() != 3 || image_emb.dim(0) != d) {
    throw ShapeError("two_way_attention: image embedding " + shape_string(image_emb.shape()) +
                     " does not have " + std::to_string(d) + " channels");
  }
  const std::size_t gh = image_emb.dim(1), gw = image_emb.dim(2);
  if (prompt.tokens.rank() != 2 || prompt.tokens.dim(1) != d) {
    throw ShapeError("two_way_attention: prompt tokens " + shape_string(prompt.tokens.shape()) +
                     " do not match token_dim " + std::to_string(d));
  }
  if (prompt.dense_embedding.shape() != image_emb.shape() ||
      prompt.image_pe.shape() != image_emb.shape()) {
    throw ShapeError("two_way_attention: prompt grid does not match image grid");
  }
  auto& tape = bind.tape();

  // Image path: embedding plus dense prompt embedding, as [grid*grid, d] tokens.
  ag::Var keys = ag::chw_to_tokens(ag::add(image_emb, tape.constant(prompt.dense_embedding)));
  const ag::Var key_pe = ag::chw_to_tokens(tape.constant(prompt.image_pe));

  const ag::Var query_pe = ag::concat_rows({bind(params.iou_token), tape.constant(prompt.tokens)});
  ag::Var queries = query_pe;

  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    // The first layer attends over the raw tokens; later layers re-add the
    // prompt positional content.
    const ag::Var q = i == 0 ? queries : ag::add(queries, query_pe);
    queries = norm(bind, l.norm1, ag::add(queries, attention(bind, l.self_attn, cfg.n_heads, q, q, queries)));

    ag::Var qk = ag::add(queries, query_pe);
    ag::Var kk = ag::add(keys, key_pe);
    queries = norm(bind, l.norm2,
                   ag::add(queries, attention(bind, l.token_to_image, cfg.n_heads, qk, kk, keys)));

    const ag::Var mlp = l.mlp_out(bind, ag::relu(l.mlp_in(bind, queries)));
    queries = norm(bind, l.norm3, ag::add(queries, mlp));

    qk = ag::add(queries, query_pe);
    kk = ag::add(keys, key_pe);
    keys = norm(bind, l.norm4,
                ag::add(keys, attention(bind, l.image_to_token, cfg.n_heads, kk, qk, queries)));
  }

  const ag::Var qk = ag::add(queries, query_pe);
  const ag::Var kk = ag::add(keys, key_pe);
  queries = norm(bind, params.final_norm,
                 ag::add(queries, attention(bind, params.final_attn, cfg.n_heads, qk, kk, keys)));

  return {queries, ag::tokens_to_chw(keys, gh, gw)};
}

ag::Var extract_mask_embeddings(const ag::Var& image_out) { return image_out; }

ag::Var predict_iou(const ag::Binder& bind, const ag::Var& tokens, const PrimParams& params) {
  if (tokens.value().rank() != 2 || tokens.dim(1) != params.config.token_dim) {
    throw ShapeError("predict_iou: tokens " + shape_string(tokens.shape()) +
                     " do not match token_dim " + std::to_string(params.config.token_dim));
  }
  ag::Var x = ag::slice_rows(tokens, 0, 1);
  for (std::size_t i = 0; i < params.iou_head.size(); ++i) {
    x = params.iou_head[i](bind, x);
    if (i + 1 < params.iou_head.size()) x = ag::relu(x);
  }
  return x;
}

}  // namespace desam
