// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <set>

#include "desam/binary_io.hpp"
#include "desam/error.hpp"
#include "desam/evaluator.hpp"
#include "test_support.hpp"

using namespace desam;
using desam::testing::TempDir;

namespace {

// Tiny 12x12 world in which a checkpoint can be forced to predict all-on or
// all-off through the head bias.
struct Tiny {
  DatasetManifest manifest;
  CacheIndex cache;
  Checkpoint ckpt;
};

EncoderSpec tiny_encoder() {
  EncoderSpec e;
  e.tap_layers = {1};
  e.tap_channels = 4;
  e.final_channels = 8;
  e.grid = 4;
  return e;
}

Tiny make_tiny(const TempDir& dir, const std::vector<std::pair<std::string, Mask>>& masks,
               PromptMode mode = PromptMode::grid_points) {
  std::vector<SampleRecord> recs;
  for (const auto& [id, m] : masks) {
    Image img(12, 12, 0.3f);
    write_image(dir / (id + ".img"), img);
    write_mask(dir / (id + ".msk"), m);
    recs.push_back({id, id.substr(0, 1), id + ".img", id + ".msk"});
  }
  write_manifest(dir / "manifest.csv", recs);
  Tiny t;
  t.manifest = load_manifest(dir / "manifest.csv");
  t.cache = precompute_embeddings(StandinEncoder(tiny_encoder(), 1), t.manifest.records, 12, dir / "c.dsec");
  t.ckpt.config.mode = mode;
  t.ckpt.config.model.image_size = 12;
  t.ckpt.config.model.prim.token_dim = 8;
  t.ckpt.config.model.prim.n_heads = 2;
  t.ckpt.config.model.prim.mlp_dim = 8;
  t.ckpt.config.model.pimm.stage_widths = {4, 4};
  t.ckpt.config.model.pimm.blocks_per_stage = 1;
  t.ckpt.model = DesamModel::create(t.ckpt.config.model, tiny_encoder(), 1);
  return t;
}

void force_output(Checkpoint& c, double bias) {
  c.model.pimm.head.weight.fill(0.0);
  c.model.pimm.head.bias.fill(bias);
}

Mask mask_with(std::size_t on) {
  Mask m(12, 12, 0);
  for (std::size_t i = 0; i < on; ++i) m.data[i] = 1;
  return m;
}

struct Row {
  const char* name;
  double sites[6];
  double printed;
};

// Published site means and Overall values.
const Row kRows[] = {
    {"Upper bound", {85.38, 83.68, 82.15, 85.21, 87.04, 84.29}, 84.63},
    {"Baseline", {63.73, 61.21, 27.41, 34.36, 44.10, 61.70}, 48.75},
    {"AdvNoise", {72.15, 63.26, 30.81, 40.12, 48.07, 60.12}, 52.42},
    {"AdvBias", {77.45, 62.12, 51.09, 70.20, 51.12, 50.69}, 60.45},
    {"RandConv", {75.52, 57.23, 44.21, 61.27, 49.98, 54.21}, 57.07},
    {"MixStyle", {73.04, 59.29, 43.00, 62.17, 53.12, 50.03}, 56.78},
    {"MaxStyle", {81.25, 70.27, 62.09, 58.18, 70.04, 67.77}, 68.27},
    {"CSDG", {80.72, 68.00, 59.78, 72.40, 68.67, 70.78}, 70.06},
    {"MedSAM", {72.32, 73.31, 61.53, 64.46, 68.89, 61.39}, 66.98},
    {"DeSAM (whole box)", {82.30, 78.06, 66.65, 82.87, 77.58, 79.05}, 77.75},
    {"DeSAM (grid points)", {82.80, 80.61, 64.77, 83.41, 80.36, 82.17}, 79.02},
    {"PIMM only", {79.09, 74.96, 54.19, 80.11, 77.22, 77.53}, 73.85},
    {"w/o IoU head", {76.74, 76.61, 58.94, 80.45, 78.39, 79.56}, 75.12},
    {"w/o fusion", {79.52, 78.37, 59.59, 82.65, 80.16, 74.58}, 75.81},
    {"grid 1", {82.00, 76.33, 62.28, 83.40, 80.31, 79.30}, 77.27},
    {"grid 5", {82.33, 77.72, 64.66, 83.40, 80.32, 80.65}, 78.18},
    {"grid 11", {82.81, 80.70, 64.74, 83.43, 80.34, 82.24}, 79.04},
    {"grid 15", {82.81, 80.68, 64.76, 83.45, 80.29, 82.25}, 79.04},
    {"grid 21", {82.81, 80.62, 64.75, 83.44, 80.34, 82.20}, 79.03},
    {"grid 25", {82.82, 80.64, 64.75, 83.40, 80.33, 82.22}, 79.03},
};

std::map<std::string, double> as_sites(const double (&v)[6]) {
  std::map<std::string, double> m;
  const char* names[] = {"A", "B", "C", "D", "E", "F"};
  for (int i = 0; i < 6; ++i) m[names[i]] = v[i];
  return m;
}

}  // namespace

TEST_CASE("published rows aggregate to their Overall column") {
  for (const auto& row : kRows) {
    const auto r = aggregate(row.name, as_sites(row.sites));
    INFO(row.name);
    CHECK(std::fabs(r.overall - row.printed) <= 0.005 + 1e-9);
    CHECK(format_percent(r.overall) == format_percent(row.printed));
  }
}

TEST_CASE("overall arithmetic") {
  CHECK(overall_of({70.0, 70.0, 70.0, 70.0, 70.0, 70.0}) == 70.0);
  CHECK(overall_of({50.0, 100.0}) == 75.0);
  CHECK_THROWS_AS(overall_of({}), ValidationError);
}

TEST_CASE("percent formatting") {
  CHECK(format_percent(75.0) == "75.00");
  CHECK(format_percent(60.445) == "60.45");
  CHECK(format_percent(84.625) == "84.63");
  CHECK(format_percent(79.0233333) == "79.02");
  CHECK(format_percent(0.0) == "0.00");
  CHECK(format_percent(-1.005) == "-1.01");
  CHECK_THROWS_AS(format_percent(std::nan("")), ValidationError);
}

TEST_CASE("report CSV layout") {
  std::vector<ExperimentReport> reps;
  for (int i : {8, 10}) reps.push_back(aggregate(kRows[i].name, as_sites(kRows[i].sites)));
  const auto csv = format_report_csv(reps);
  const auto lines = io::split(csv, '\n');
  REQUIRE(lines.size() == 4);  // header, two rows, trailing empty
  CHECK(lines[0] == "Method,A to Rest,B to Rest,C to Rest,D to Rest,E to Rest,F to Rest,Overall");
  CHECK(io::split(lines[1], ',').size() == 8);
  CHECK(lines[2] == "DeSAM (grid points),82.80,80.61,64.77,83.41,80.36,82.17,79.02");
  CHECK(lines[1].ends_with(",66.98"));

  TempDir dir("ev");
  emit_report(reps, dir / "r.csv");
  CHECK(io::read_text(dir / "r.csv") == csv);

  auto partial = reps;
  partial[1].per_source.erase("F");
  CHECK_THROWS_AS(format_report_csv(partial), ValidationError);
}

TEST_CASE("overlay colours") {
  Image img(2, 2, 0.5f);
  Mask truth(2, 2, 0), pred(2, 2, 0);
  truth.at(0, 0) = 1;
  truth.at(0, 1) = 1;
  SUBCASE("empty prediction shows only the truth colour") {
    const auto px = render_overlay(img, truth, pred);
    CHECK(px[0] == kTruthColor);
    CHECK(px[1] == kTruthColor);
    CHECK(px[2] == Rgb{128, 128, 128});
    for (const auto& c : px) CHECK_FALSE(c == kPredColor);
  }
  SUBCASE("identical masks blend everywhere on the mask") {
    const auto px = render_overlay(img, truth, truth);
    CHECK(px[0] == kBothColor);
    CHECK(px[1] == kBothColor);
    CHECK_FALSE(px[2] == kBothColor);
  }
  SUBCASE("prediction only") {
    pred.at(1, 1) = 1;
    CHECK(render_overlay(img, truth, pred)[3] == kPredColor);
  }
  SUBCASE("PPM file") {
    TempDir dir("ev");
    SegmentationSample s{"s", "A", img, truth};
    emit_overlay(s, pred, dir / "o.ppm");
    const auto b = io::read_file(dir / "o.ppm");
    const std::string head = "P6\n2 2\n255\n";
    REQUIRE(b.size() == head.size() + 12);
    CHECK(std::string(b.begin(), b.begin() + static_cast<long>(head.size())) == head);
    CHECK(b[head.size()] == kTruthColor.r);
    CHECK(b[head.size() + 2] == kTruthColor.b);
  }
  CHECK_THROWS_AS(render_overlay(img, truth, Mask(3, 3)), ShapeError);
  // The overlap colour is the average of the two fixed colours.
  CHECK(kBothColor.r == (kPredColor.r + kTruthColor.r) / 2);
  CHECK(kBothColor.g == (kPredColor.g + kTruthColor.g) / 2);
  CHECK(kBothColor.b == (kPredColor.b + kTruthColor.b) / 2);
}

TEST_CASE("site evaluation arithmetic") {
  TempDir dir("ev");
  SUBCASE("perfect predictor on three samples") {
    auto t = make_tiny(dir, {{"A1", mask_with(144)}, {"A2", mask_with(144)}, {"A3", mask_with(144)}});
    force_output(t.ckpt, 50.0);
    const auto r = evaluate_site(t.ckpt, "A", {"A1", "A2", "A3"}, t.manifest, t.cache, {}, 3);
    CHECK(r.mean_percent == 100.0);
    CHECK(format_percent(r.mean_percent) == "100.00");
  }
  SUBCASE("dice 0.5 and 1.0 average to 75") {
    auto t = make_tiny(dir, {{"A1", mask_with(48)}, {"A2", mask_with(144)}});
    force_output(t.ckpt, 50.0);
    const auto r = evaluate_site(t.ckpt, "A", {"A1", "A2"}, t.manifest, t.cache, {}, 3);
    REQUIRE(r.per_sample.size() == 2);
    CHECK(r.per_sample[0].second == 0.5);
    CHECK(r.per_sample[1].second == 1.0);
    CHECK(format_percent(r.mean_percent) == "75.00");
  }
  SUBCASE("empty truth with empty prediction counts as 1") {
    auto t = make_tiny(dir, {{"A1", mask_with(0)}});
    force_output(t.ckpt, -50.0);
    const auto r = evaluate_site(t.ckpt, "A", {"A1"}, t.manifest, t.cache, {}, 3);
    CHECK(r.per_sample[0].second == 1.0);
  }
  SUBCASE("cache miss") {
    auto t = make_tiny(dir, {{"A1", mask_with(3)}});
    CHECK_THROWS_AS(evaluate_site(t.ckpt, "A", {"A1", "A9"}, t.manifest, t.cache, {}, 3), NotFoundError);
  }
}

TEST_CASE("predict_sample") {
  TempDir dir("ev");
  auto t = make_tiny(dir, {{"A1", mask_with(40)}});
  const auto emb = load_embeddings(t.cache, "A1");
  CHECK_THROWS_AS(predict_sample(t.ckpt, emb, whole_image_box(12), {}), ValidationError);
  const auto m1 = predict_sample(t.ckpt, emb, grid_points(1, 12), {});
  CHECK(m1 == threshold_logits(infer(t.ckpt.model, EmbeddingTensors::from(emb), grid_points(1, 12)).logits));
  // Reversing the prompt order leaves the merged mask unchanged.
  auto ps = grid_points(3, 12);
  const auto fwd = predict_sample(t.ckpt, emb, ps, {});
  std::reverse(ps.points.begin(), ps.points.end());
  CHECK(predict_sample(t.ckpt, emb, ps, {}) == fwd);
  auto bad = emb;
  bad.final = FeatureMap(3, 4, 4);
  CHECK_THROWS_AS(predict_sample(t.ckpt, bad, grid_points(1, 12), {}), ShapeError);
}

TEST_CASE("experiment, ablation and sweep consistency") {
  TempDir dir("ev");
  SyntheticOptions o;
  o.sites = {"A", "B", "C"};
  o.samples_per_site = 4;
  const auto data = desam::testing::make_desk_data(dir.path(), o);
  auto cfg = desam::testing::desk_config();
  cfg.epochs = 1;
  cfg.eval_grid = 9;

  const auto run = run_experiment(cfg, data.manifest, data.cache);
  CHECK(run.report.method == "DeSAM");
  CHECK(run.report.per_source.size() == 3);
  CHECK(run.checkpoints.size() == 3);
  for (const auto& [src, reps] : run.site_reports) {
    CHECK(reps.size() == 2);
    std::vector<double> means;
    for (const auto& r : reps) {
      CHECK(r.site != src);
      double s = 0.0;
      for (const auto& [id, d] : r.per_sample) s += d;
      CHECK(r.mean_percent == doctest::Approx(100.0 * s / static_cast<double>(r.per_sample.size())));
      means.push_back(r.mean_percent);
    }
    CHECK(run.report.per_source.at(src) == overall_of(means));
  }

  const auto sweep = grid_sweep(run.checkpoints, data.manifest, data.cache, {1, 9}, cfg.merge);
  REQUIRE(sweep.size() == 2);
  CHECK(sweep.at(9).per_source == run.report.per_source);
  CHECK(sweep.at(9).overall == run.report.overall);
  CHECK(sweep.at(1).method == "grid 1x1");

  const auto abl = run_ablation(cfg, AblationVariant::pimm_only, data.manifest, data.cache);
  CHECK(abl.report.method == "pimm_only");
  for (const auto& [src, ck] : abl.checkpoints) CHECK(ck.config.model.variant == AblationVariant::pimm_only);

  auto box = cfg;
  box.mode = PromptMode::whole_box;
  const auto box_run = run_experiment(box, data.manifest, data.cache);
  CHECK_THROWS_AS(grid_sweep(box_run.checkpoints, data.manifest, data.cache, {3}, cfg.merge), ValidationError);
  CHECK_THROWS_AS(grid_sweep({}, data.manifest, data.cache, {3}, cfg.merge), ValidationError);
}
