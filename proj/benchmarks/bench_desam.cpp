// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <filesystem>

#include "desam/evaluator.hpp"
#include "desam/synthetic.hpp"

using namespace desam;

namespace {

// range(0) scales everything: grid, token width and image side grow together.
struct Setup {
  EncoderSpec encoder;
  ModelConfig config;
  EmbeddingTensors emb;
  Mask gt;

  explicit Setup(std::size_t scale) {
    encoder.tap_layers = {1, 2};
    encoder.tap_channels = 8 * scale;
    encoder.final_channels = 8 * scale;
    encoder.grid = 4 * scale;
    config.image_size = 16 * scale;
    config.prim = {8 * scale, 2, 2, 16 * scale, 3};
    config.pimm.stage_widths = {8 * scale, 8 * scale, 4 * scale};
    config.pimm.blocks_per_stage = 1;
    config.pimm.se_reduction = 4;
    SyntheticOptions so;
    so.image_size = config.image_size;
    const auto sample = make_synthetic_sample("A", 0, so);
    emb = EmbeddingTensors::from(standin_encode(sample, encoder, 7));
    gt = sample.mask;
  }
};

void BM_StandinEncode(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)));
  SyntheticOptions so;
  so.image_size = s.config.image_size;
  const auto sample = make_synthetic_sample("A", 1, so);
  for (auto _ : state) benchmark::DoNotOptimize(standin_encode(sample, s.encoder, 7));
}
BENCHMARK(BM_StandinEncode)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond);

void BM_SinglePromptInference(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)));
  const auto model = DesamModel::create(s.config, s.encoder, 3);
  const auto prompts = grid_points(1, s.config.image_size);
  for (auto _ : state) benchmark::DoNotOptimize(infer(model, s.emb, prompts));
}
BENCHMARK(BM_SinglePromptInference)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_TrainingStep(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)));
  const auto model = DesamModel::create(s.config, s.encoder, 3);
  const Tensor gt = mask_to_tensor(s.gt);
  Rng rng(1);
  const auto prompts = sample_training_points(s.gt, 1, 0, rng);
  const auto pe = encode_prompts(prompts, model.prompt, s.encoder.grid);
  for (auto _ : state) {
    ag::Tape tape;
    const ag::Binder bind(tape, true);
    const auto out = forward(bind, model, s.emb, pe);
    const auto loss = combined_loss(PromptMode::grid_points, dice_loss(out.logits, gt), ce_loss(out.logits, gt),
                                    mse_loss(out.iou, 0.5), LossWeights{});
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad_of(model.pimm.head.weight));
  }
}
BENCHMARK(BM_TrainingStep)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_GridInference(benchmark::State& state) {
  const Setup s(2);
  const auto model = DesamModel::create(s.config, s.encoder, 3);
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(predict_mask(model, PromptMode::grid_points, s.emb, n, {}));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_GridInference)->Arg(1)->Arg(3)->Arg(9)->Unit(benchmark::kMillisecond);

void BM_CacheLoad(benchmark::State& state) {
  const auto dir = std::filesystem::temp_directory_path() / "desam_bench_cache";
  std::filesystem::create_directories(dir);
  SyntheticOptions so;
  so.sites = {"A"};
  so.samples_per_site = 8;
  const auto manifest = load_manifest(write_synthetic_dataset(dir, so));
  EncoderSpec spec;
  spec.tap_layers = {1, 2};
  spec.tap_channels = 16;
  spec.final_channels = 16;
  spec.grid = static_cast<std::size_t>(state.range(0));
  const auto cache = precompute_embeddings(StandinEncoder(spec, 7), manifest.records, 32, dir / "cache.dsec");
  for (auto _ : state) benchmark::DoNotOptimize(load_embeddings(cache, "A_3"));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(cache.entries.at("A_3").length));
  std::filesystem::remove_all(dir);
}
BENCHMARK(BM_CacheLoad)->Arg(8)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_DiceScore(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  Mask a(side, side), b(side, side);
  for (auto& v : a.data) v = rng.below(2);
  for (auto& v : b.data) v = rng.below(2);
  for (auto _ : state) benchmark::DoNotOptimize(dice_score(a, b));
}
BENCHMARK(BM_DiceScore)->Arg(32)->Arg(288);

}  // namespace

BENCHMARK_MAIN();
