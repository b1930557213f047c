// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "desam/error.hpp"
#include "desam/prim.hpp"
#include "test_support.hpp"

using namespace desam;
using desam::testing::check_gradients;
using desam::testing::random_tensor;

namespace {

PrimConfig toy_config() {
  PrimConfig c;
  c.token_dim = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.mlp_dim = 12;
  c.iou_head_depth = 3;
  return c;
}

std::vector<std::pair<std::string, Tensor*>> all_params(PrimParams& p) {
  std::vector<std::pair<std::string, Tensor*>> out;
  p.for_each([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

PromptEmbeddings two_point_prompt(const FrozenPromptParams& fp, std::size_t grid) {
  PromptSet ps;
  ps.image_size = 16;
  ps.points = {{3.5, 4.5, PointLabel::positive}, {12.5, 9.5, PointLabel::negative}};
  return encode_prompts(ps, fp, grid);
}

// Row-wise layer norm with unit gain, written out directly.
Tensor layer_norm_oracle(const Tensor& chw) {
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out = chw;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double m = 0.0, v = 0.0;
      for (std::size_t k = 0; k < c; ++k) m += chw.at(k, y, x);
      m /= static_cast<double>(c);
      for (std::size_t k = 0; k < c; ++k) v += (chw.at(k, y, x) - m) * (chw.at(k, y, x) - m);
      v /= static_cast<double>(c);
      for (std::size_t k = 0; k < c; ++k) out.at(k, y, x) = (chw.at(k, y, x) - m) / std::sqrt(v + 1e-5);
    }
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  PrimConfig c = toy_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = toy_config();
  c.iou_head_depth = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("two-way attention shape contract") {
  const auto params = PrimParams::create(toy_config(), 1);
  const auto fp = FrozenPromptParams::create(8, 2);
  Rng rng(3);
  ag::Tape tape;
  ag::Binder bind(tape, false);
  const auto out = two_way_attention(bind, two_point_prompt(fp, 4),
                                     tape.constant(random_tensor({8, 4, 4}, rng)), params);
  CHECK(out.tokens.shape() == Shape{3, 8});
  CHECK(out.image.shape() == Shape{8, 4, 4});
  CHECK(predict_iou(bind, out.tokens, params).shape() == Shape{1, 1});
  CHECK_THROWS_AS(two_way_attention(bind, two_point_prompt(fp, 4),
                                    tape.constant(random_tensor({6, 4, 4}, rng)), params),
                  ShapeError);
  CHECK_THROWS_AS(two_way_attention(bind, two_point_prompt(fp, 3),
                                    tape.constant(random_tensor({8, 4, 4}, rng)), params),
                  ShapeError);
}

TEST_CASE("zeroed attention and feed-forward leave only the residual path") {
  auto params = PrimParams::create(toy_config(), 1);
  params.for_each([](const std::string& name, Tensor& t) {
    const bool is_norm = name.find("norm") != std::string::npos;
    if (!is_norm) t.fill(0.0);
    else if (name.ends_with(".gamma")) t.fill(1.0);
    else t.fill(0.0);
  });
  auto fp = FrozenPromptParams::create(8, 2);
  auto prompt = two_point_prompt(fp, 4);
  prompt.dense_embedding.fill(0.0);
  Rng rng(4);
  const Tensor image = random_tensor({8, 4, 4}, rng);
  ag::Tape tape;
  const auto out = two_way_attention(ag::Binder(tape, false), prompt, tape.constant(image), params);

  // Each layer adds a zero attention update and renormalizes the image tokens.
  Tensor expect = image;
  for (std::size_t l = 0; l < toy_config().n_layers; ++l) expect = layer_norm_oracle(expect);
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(out.image.value()[i] == doctest::Approx(expect[i]).epsilon(1e-12));

  // With tokens already normalized the residual path is the identity up to eps.
  const Tensor normed = layer_norm_oracle(image);
  ag::Tape tape2;
  const auto out2 = two_way_attention(ag::Binder(tape2, false), prompt, tape2.constant(normed), params);
  for (std::size_t i = 0; i < normed.size(); ++i) CHECK(out2.image.value()[i] == doctest::Approx(normed[i]).epsilon(1e-4));
}

TEST_CASE("mask embeddings are the image path unchanged") {
  ag::Tape tape;
  Rng rng(5);
  Tensor t = random_tensor({16, 4, 4}, rng);
  auto x = tape.param(t);
  auto m = extract_mask_embeddings(x);
  CHECK(m.value() == t);
  CHECK(m.id() == x.id());
  tape.backward(ag::sum(m));
  for (double g : tape.grad_of(t)->data()) CHECK(g == 1.0);

  ag::Tape big;
  Tensor wide({256, 64, 64});
  CHECK(extract_mask_embeddings(big.constant(wide)).shape() == Shape{256, 64, 64});
}

TEST_CASE("IoU head arithmetic") {
  auto params = PrimParams::create(toy_config(), 1);
  ag::Tape tape;
  ag::Binder bind(tape, false);
  Rng rng(6);
  SUBCASE("zero weights and biases") {
    for (auto& l : params.iou_head) {
      l.weight.fill(0.0);
      l.bias.fill(0.0);
    }
    auto y = predict_iou(bind, tape.constant(random_tensor({3, 8}, rng)), params);
    CHECK(y.value()[0] == 0.0);
  }
  SUBCASE("one affine layer with bias 0.3 on a zero token") {
    PrimConfig c = toy_config();
    c.iou_head_depth = 1;
    auto one = PrimParams::create(c, 1);
    REQUIRE(one.iou_head.size() == 1);
    one.iou_head[0].weight.fill(1.0);
    one.iou_head[0].bias[0] = 0.3;
    auto y = predict_iou(bind, tape.constant(Tensor({2, 8})), one);
    CHECK(y.value()[0] == doctest::Approx(0.3).epsilon(1e-15));
  }
  SUBCASE("reads only the first token") {
    Tensor tok = random_tensor({3, 8}, rng);
    auto a = predict_iou(bind, tape.constant(tok), params).value()[0];
    for (std::size_t k = 0; k < 8; ++k) tok.at(2, k) += 5.0;
    CHECK(predict_iou(bind, tape.constant(tok), params).value()[0] == a);
  }
}

TEST_CASE("no mask head in the parameter set") {
  auto params = PrimParams::create(toy_config(), 1);
  params.for_each([](const std::string& name, Tensor&) {
    CHECK(name.find("mask") == std::string::npos);
    CHECK(name.find("hypernetwork") == std::string::npos);
  });
  CHECK(params.iou_head.back().weight.dim(0) == 1);
}

TEST_CASE("outputs depend on the prompt tokens") {
  const auto params = PrimParams::create(toy_config(), 1);
  const auto fp = FrozenPromptParams::create(8, 2);
  Rng rng(7);
  const Tensor image = random_tensor({8, 4, 4}, rng);
  auto prompt = two_point_prompt(fp, 4);
  ag::Tape t1;
  const Tensor base = two_way_attention(ag::Binder(t1, false), prompt, t1.constant(image), params).tokens.value();
  prompt.tokens.at(1, 3) += 1e-3;
  ag::Tape t2;
  const Tensor moved = two_way_attention(ag::Binder(t2, false), prompt, t2.constant(image), params).tokens.value();
  double diff = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) diff += std::fabs(base[i] - moved[i]);
  CHECK(diff > 1e-8);
}

TEST_CASE("IoU prediction is invariant to point token order") {
  const auto params = PrimParams::create(toy_config(), 1);
  const auto fp = FrozenPromptParams::create(8, 2);
  Rng rng(8);
  const Tensor image = random_tensor({8, 4, 4}, rng);
  PromptSet ps;
  ps.image_size = 16;
  for (int i = 0; i < 4; ++i) ps.points.push_back({rng.uniform(0, 16), rng.uniform(0, 16), PointLabel::positive});
  auto iou_of = [&](const PromptSet& p) {
    ag::Tape t;
    ag::Binder b(t, false);
    const auto out = two_way_attention(b, encode_prompts(p, fp, 4), t.constant(image), params);
    return predict_iou(b, out.tokens, params).value()[0];
  };
  const double base = iou_of(ps);
  PromptSet rev = ps;
  std::reverse(rev.points.begin(), rev.points.end());
  CHECK(iou_of(rev) == doctest::Approx(base).epsilon(1e-12));
  std::swap(rev.points[0], rev.points[2]);
  CHECK(iou_of(rev) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("gradients of the IoU prediction through the transformer") {
  auto params = PrimParams::create(toy_config(), 11);
  const auto fp = FrozenPromptParams::create(8, 2);
  Rng rng(9);
  Tensor image = random_tensor({8, 4, 4}, rng);
  const auto prompt = two_point_prompt(fp, 4);
  auto ps = all_params(params);
  ps.emplace_back("image", &image);
  auto r = check_gradients(ps, [&](ag::Tape& t, const ag::Binder& bind) {
    const auto out = two_way_attention(bind, prompt, bind(image), params);
    // Include the image path so every weight is exercised through both outputs.
    Rng wr(1);
    const auto probe = ag::sum(ag::mul(extract_mask_embeddings(out.image), t.constant(random_tensor({8, 4, 4}, wr))));
    return ag::add(ag::sum(predict_iou(bind, out.tokens, params)), ag::scale(probe, 0.1));
  });
  INFO(r.worst);
  CHECK(r.checked > 1000);
  CHECK(r.max_rel_error < 1e-4);
}
