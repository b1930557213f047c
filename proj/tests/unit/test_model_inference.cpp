// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "desam/error.hpp"
#include "desam/inference.hpp"
#include "desam/model.hpp"
#include "test_support.hpp"

using namespace desam;
using desam::testing::check_gradients;
using desam::testing::random_tensor;

namespace {

EncoderSpec toy_encoder() {
  EncoderSpec e;
  e.tap_layers = {1, 2};
  e.tap_channels = 4;
  e.final_channels = 8;
  e.grid = 4;
  return e;
}

ModelConfig toy_model(AblationVariant v = AblationVariant::full) {
  ModelConfig c;
  c.image_size = 16;
  c.prim.token_dim = 8;
  c.prim.n_layers = 1;
  c.prim.n_heads = 2;
  c.prim.mlp_dim = 8;
  c.prim.iou_head_depth = 2;
  c.pimm.stage_widths = {6, 4, 3};
  c.pimm.blocks_per_stage = 1;
  c.pimm.se_reduction = 2;
  c.variant = v;
  return c;
}

EmbeddingTensors toy_embeddings(Rng& rng) {
  EmbeddingTensors e;
  e.taps = {random_tensor({4, 4, 4}, rng), random_tensor({4, 4, 4}, rng)};
  e.final = random_tensor({8, 4, 4}, rng);
  return e;
}

PromptSet one_point(double x, double y) {
  PromptSet ps;
  ps.image_size = 16;
  ps.points.push_back({x, y, PointLabel::positive});
  return ps;
}

Tensor const_map(double v, std::size_t n = 4) { return Tensor({n, n}, v); }

}  // namespace

TEST_CASE("model creation checks widths") {
  EncoderSpec e = toy_encoder();
  e.final_channels = 6;
  CHECK_THROWS_AS(DesamModel::create(toy_model(), e, 1), ValidationError);
  const auto m = DesamModel::create(toy_model(), toy_encoder(), 1);
  CHECK(m.prompt.token_dim() == 8);
  CHECK(m.pimm.stages.size() == 2);
}

TEST_CASE("variant names") {
  for (auto v : {AblationVariant::full, AblationVariant::pimm_only, AblationVariant::no_iou_head,
                 AblationVariant::no_mask_fusion}) {
    CHECK(parse_ablation_variant(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_ablation_variant("half"), FormatError);
}

TEST_CASE("forward outputs per variant") {
  Rng rng(1);
  const auto emb = toy_embeddings(rng);
  for (auto v : {AblationVariant::full, AblationVariant::pimm_only, AblationVariant::no_iou_head,
                 AblationVariant::no_mask_fusion}) {
    const auto m = DesamModel::create(toy_model(v), toy_encoder(), 2);
    const auto out = infer(m, emb, one_point(3.5, 7.5));
    CHECK(out.logits.shape() == Shape{16, 16});
    CHECK(out.logits.all_finite());
    CHECK(std::isnan(out.iou) == !m.uses_iou_head());
  }
}

TEST_CASE("trainable partition per variant") {
  auto trainable_names = [](AblationVariant v) {
    std::vector<std::string> names;
    DesamModel::create(toy_model(v), toy_encoder(), 1)
        .for_each([&](const std::string& n, const Tensor&, bool t) {
          if (t) names.push_back(n);
        });
    return names;
  };
  auto has_prefix = [](const std::vector<std::string>& names, const std::string& p) {
    for (const auto& n : names)
      if (n.rfind(p, 0) == 0) return true;
    return false;
  };
  for (auto v : {AblationVariant::full, AblationVariant::pimm_only, AblationVariant::no_iou_head,
                 AblationVariant::no_mask_fusion}) {
    const auto names = trainable_names(v);
    CHECK_FALSE(has_prefix(names, "prompt."));
    CHECK(has_prefix(names, "pimm.head"));
  }
  CHECK(has_prefix(trainable_names(AblationVariant::full), "prim.iou_head"));
  CHECK(has_prefix(trainable_names(AblationVariant::full), "pimm.fusion_proj"));
  CHECK_FALSE(has_prefix(trainable_names(AblationVariant::pimm_only), "prim."));
  CHECK_FALSE(has_prefix(trainable_names(AblationVariant::no_iou_head), "prim.iou_head"));
  CHECK(has_prefix(trainable_names(AblationVariant::no_iou_head), "prim.layers"));
  CHECK_FALSE(has_prefix(trainable_names(AblationVariant::no_mask_fusion), "pimm.fusion_proj"));
}

TEST_CASE("PIMM-only output ignores the prompt and leaves PRIM without gradient") {
  Rng rng(2);
  const auto emb = toy_embeddings(rng);
  const auto m = DesamModel::create(toy_model(AblationVariant::pimm_only), toy_encoder(), 3);
  CHECK(infer(m, emb, one_point(1.5, 1.5)).logits == infer(m, emb, one_point(14.5, 9.5)).logits);

  ag::Tape tape;
  ag::Binder bind(tape, true);
  const auto out = forward(bind, m, emb, encode_prompts(one_point(2, 2), m.prompt, 4));
  tape.backward(ag::sum(out.logits));
  m.prim.for_each([&](const std::string& name, const Tensor& t) {
    const Tensor* g = tape.grad_of(t);
    double norm = 0.0;
    if (g)
      for (double v : g->data()) norm += v * v;
    CHECK_MESSAGE(norm == 0.0, name);
  });
  CHECK(tape.grad_of(m.pimm.head.weight) != nullptr);
}

TEST_CASE("no-fusion output matches PIMM-only and keeps the projection frozen") {
  Rng rng(3);
  const auto emb = toy_embeddings(rng);
  const auto nf = DesamModel::create(toy_model(AblationVariant::no_mask_fusion), toy_encoder(), 4);
  const auto po = DesamModel::create(toy_model(AblationVariant::pimm_only), toy_encoder(), 4);
  CHECK(infer(nf, emb, one_point(5, 5)).logits == infer(po, emb, one_point(5, 5)).logits);

  ag::Tape tape;
  ag::Binder bind(tape, true);
  const auto out = forward(bind, nf, emb, encode_prompts(one_point(5, 5), nf.prompt, 4));
  tape.backward(ag::add(ag::sum(out.logits), ag::sum(out.iou)));
  CHECK(tape.grad_of(nf.pimm.fusion_proj.weight) == nullptr);
  CHECK(tape.grad_of(nf.prim.iou_head[0].weight) != nullptr);
}

TEST_CASE("full model logits depend on the prompt") {
  Rng rng(4);
  const auto emb = toy_embeddings(rng);
  const auto m = DesamModel::create(toy_model(), toy_encoder(), 5);
  CHECK_FALSE(infer(m, emb, one_point(1.5, 1.5)).logits == infer(m, emb, one_point(14.5, 9.5)).logits);
}

TEST_CASE("end-to-end gradients through PRIM, fusion, PIMM and the loss") {
  auto m = DesamModel::create(toy_model(), toy_encoder(), 6);
  Rng rng(5);
  const auto emb = toy_embeddings(rng);
  const Mask gt = desam::testing::random_mask(16, 16, rng);
  const Tensor gt_t = mask_to_tensor(gt);
  const auto prompt = encode_prompts(one_point(6.5, 9.5), m.prompt, 4);
  std::vector<std::pair<std::string, Tensor*>> ps;
  m.for_each([&](const std::string& n, Tensor& t, bool trainable) {
    if (trainable) ps.emplace_back(n, &t);
  });
  auto r = check_gradients(ps, [&](ag::Tape&, const ag::Binder& bind) {
    const auto out = forward(bind, m, emb, prompt);
    return combined_loss(PromptMode::grid_points, dice_loss(out.logits, gt_t), ce_loss(out.logits, gt_t),
                         mse_loss(out.iou, 0.7), LossWeights{});
  });
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("merge strategies") {
  const MergeStrategy mean{MergeKind::mean_probability, 0.5};
  const MergeStrategy mx{MergeKind::max_probability, 0.5};
  const MergeStrategy uni{MergeKind::union_binary, 0.5};
  const MergeStrategy iw{MergeKind::iou_weighted, 0.5};
  const std::vector<double> no_iou{std::numeric_limits<double>::quiet_NaN()};

  SUBCASE("singleton is plain thresholding") {
    Rng rng(6);
    Tensor p({4, 4});
    for (auto& v : p.data()) v = rng.uniform();
    Mask expect(4, 4);
    for (std::size_t i = 0; i < 16; ++i) expect.data[i] = p[i] > 0.5;
    for (const auto& s : {mean, mx, uni, iw}) CHECK(merge_predictions({p}, no_iou, s) == expect);
  }
  SUBCASE("identical maps merge to the same mask") {
    Rng rng(7);
    Tensor p({4, 4});
    for (auto& v : p.data()) v = rng.uniform();
    const auto single = merge_predictions({p}, no_iou, mean);
    for (const auto& s : {mean, mx, uni, iw})
      CHECK(merge_predictions({p, p, p}, {0.2, 0.9, 0.5}, s) == single);
  }
  SUBCASE("union keeps disjoint supra-threshold regions") {
    Tensor a = const_map(0.1), b = const_map(0.1);
    a[0] = 0.9;
    b[15] = 0.8;
    const auto u = merge_predictions({a, b}, {0.5, 0.5}, uni);
    CHECK(u.data[0] == 1);
    CHECK(u.data[15] == 1);
    CHECK(u.data[5] == 0);
    // The mean of 0.9 and 0.1 stays at the threshold and is not counted.
    CHECK(merge_predictions({a, b}, {0.5, 0.5}, mean).data[0] == 0);
    CHECK(merge_predictions({a, b}, {0.5, 0.5}, mx).data[15] == 1);
  }
  SUBCASE("IoU weighting") {
    const Tensor a = const_map(0.9), b = const_map(0.2);
    CHECK(merge_predictions({a, b}, {1.0, 0.0}, iw).data[0] == 1);
    CHECK(merge_predictions({a, b}, {0.1, 0.9}, iw).data[0] == 0);  // 0.27 weighted mean
    CHECK(merge_predictions({a, b}, {-1.0, 0.0}, iw).data[0] == 1);  // uniform fallback: 0.55
    CHECK_THROWS_AS(merge_predictions({a, b}, {1.0}, iw), ValidationError);
  }
  SUBCASE("invalid inputs") {
    CHECK_THROWS_AS(merge_predictions({}, {}, mean), ValidationError);
    CHECK_THROWS_AS(merge_predictions({const_map(0.1), const_map(0.1, 3)}, {}, mean), ShapeError);
    CHECK_THROWS_AS(merge_predictions({const_map(0.1)}, {}, {MergeKind::mean_probability, 1.0}), ValidationError);
  }
  CHECK(parse_merge_kind("mean") == MergeKind::mean_probability);
  CHECK(parse_merge_kind(to_string(MergeKind::iou_weighted)) == MergeKind::iou_weighted);
  CHECK_THROWS_AS(parse_merge_kind("vote"), FormatError);
}

TEST_CASE("mean merge is invariant under prompt order") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> maps;
    std::vector<double> ious;
    for (int k = 0; k < 7; ++k) {
      Tensor p({6, 6});
      // Values near the threshold so rounding order would matter if unsorted.
      for (auto& v : p.data()) v = 0.5 + (rng.uniform() - 0.5) * 1e-3;
      maps.push_back(p);
      ious.push_back(rng.uniform());
    }
    for (auto kind : {MergeKind::mean_probability, MergeKind::iou_weighted, MergeKind::max_probability,
                      MergeKind::union_binary}) {
      const auto base = merge_predictions(maps, ious, {kind, 0.5});
      std::vector<std::size_t> order(maps.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (int perm = 0; perm < 5; ++perm) {
        rng.shuffle(order);
        std::vector<Tensor> pm;
        std::vector<double> pi;
        for (auto i : order) {
          pm.push_back(maps[i]);
          pi.push_back(ious[i]);
        }
        CHECK(merge_predictions(pm, pi, {kind, 0.5}) == base);
      }
    }
  }
}

TEST_CASE("prompt runs and mask prediction") {
  Rng rng(9);
  const auto emb = toy_embeddings(rng);
  const auto full = DesamModel::create(toy_model(), toy_encoder(), 7);
  CHECK(run_prompts(full, emb, grid_points(3, 16)).probabilities.size() == 9);
  CHECK(run_prompts(full, emb, whole_image_box(16)).probabilities.size() == 1);
  const auto po = DesamModel::create(toy_model(AblationVariant::pimm_only), toy_encoder(), 7);
  CHECK(run_prompts(po, emb, grid_points(3, 16)).probabilities.size() == 1);
  CHECK_THROWS_AS(run_prompts(full, emb, grid_points(3, 32)), ValidationError);

  // A 1x1 grid predicts exactly the thresholded single-prompt output.
  const auto single = infer(full, emb, grid_points(1, 16));
  Mask expect = threshold_logits(single.logits);
  CHECK(predict_mask(full, PromptMode::grid_points, emb, 1, {}) == expect);
  CHECK(predict_mask(full, PromptMode::whole_box, emb, 9, {}) ==
        threshold_logits(infer(full, emb, whole_image_box(16)).logits));
}
