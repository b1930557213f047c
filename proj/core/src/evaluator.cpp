// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "desam/binary_io.hpp"
#include "desam/error.hpp"

namespace desam {

double overall_of(const std::vector<double>& site_values) {
  if (site_values.empty()) throw ValidationError("overall of an empty row");
  double sum = 0.0;
  for (double v : site_values) sum += v;
  return sum / static_cast<double>(site_values.size());
}

ExperimentReport aggregate(const std::string& method, const std::map<std::string, double>& per_source) {
  ExperimentReport r;
  r.method = method;
  r.per_source = per_source;
  std::vector<double> v;
  for (const auto& [site, value] : per_source) v.push_back(value);
  r.overall = overall_of(v);
  return r;
}

std::string format_percent(double v) {
  if (!std::isfinite(v)) throw ValidationError("cannot format a non-finite percentage");
  const double mag = std::floor(std::fabs(v) * 100.0 + 0.5 + 1e-7);
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s%.2f", (v < 0 && mag > 0) ? "-" : "", mag / 100.0);
  return buf;
}

Mask predict_sample(const Checkpoint& ckpt, const ImageEmbeddingSet& embeddings,
                    const PromptSet& prompts, const MergeStrategy& merge) {
  if (prompts.mode != ckpt.config.mode) {
    throw ValidationError("prompt mode " + to_string(prompts.mode) + " does not match checkpoint mode " +
                          to_string(ckpt.config.mode));
  }
  check_embeddings(embeddings, ckpt.model.encoder);
  const auto out = run_prompts(ckpt.model, EmbeddingTensors::from(embeddings), prompts);
  return merge_predictions(out.probabilities, out.ious, merge);
}

SiteReport evaluate_site(const Checkpoint& ckpt, const std::string& site,
                         const std::vector<std::string>& sample_ids, const DatasetManifest& manifest,
                         const CacheIndex& cache, const MergeStrategy& merge, std::size_t grid) {
  SiteReport rep;
  rep.site = site;
  const std::size_t s = ckpt.model.config.image_size;
  const PromptSet prompts =
      ckpt.config.mode == PromptMode::whole_box ? whole_image_box(s) : grid_points(grid, s);
  double sum = 0.0;
  for (const auto& id : sample_ids) {
    if (!cache.contains(id)) throw NotFoundError("cache miss: no embeddings for sample '" + id + "'");
    const Mask gt = load_mask(manifest.find(id), s);
    const Mask pred = predict_sample(ckpt, load_embeddings(cache, id), prompts, merge);
    const double d = dice_score(pred, gt);
    rep.per_sample.emplace_back(id, d);
    sum += d;
  }
  rep.mean_percent = sample_ids.empty() ? 0.0 : 100.0 * sum / static_cast<double>(sample_ids.size());
  return rep;
}

namespace {

std::map<std::string, double> evaluate_targets(const Checkpoint& ckpt, const EvalPlan& plan,
                                               const DatasetManifest& manifest, const CacheIndex& cache,
                                               const MergeStrategy& merge, std::size_t grid,
                                               std::vector<SiteReport>* reports) {
  std::vector<double> means;
  for (const auto& [site, ids] : plan.target_sites) {
    auto rep = evaluate_site(ckpt, site, ids, manifest, cache, merge, grid);
    means.push_back(rep.mean_percent);
    if (reports) reports->push_back(std::move(rep));
  }
  return {{plan.source_site, overall_of(means)}};
}

}  // namespace

ExperimentRun run_experiment(const TrainConfig& config, const DatasetManifest& manifest,
                             const CacheIndex& cache, const std::string& method) {
  config.validate();
  ExperimentRun run;
  std::map<std::string, double> per_source;
  for (const auto& source : manifest.sites) {
    const EvalPlan plan = leave_one_site_out(manifest, source, config.seed, config.split);
    auto trained = train(config, plan, cache, manifest);
    auto& reports = run.site_reports[source];
    const auto v = evaluate_targets(trained.best, plan, manifest, cache, config.merge,
                                    config.eval_grid, &reports);
    per_source.insert(v.begin(), v.end());
    run.checkpoints.emplace(source, std::move(trained.best));
  }
  run.report = aggregate(method, per_source);
  return run;
}

ExperimentRun run_ablation(const TrainConfig& config, AblationVariant variant,
                           const DatasetManifest& manifest, const CacheIndex& cache) {
  TrainConfig c = config;
  c.model.variant = variant;
  return run_experiment(c, manifest, cache, to_string(variant));
}

std::map<std::size_t, ExperimentReport> grid_sweep(const std::map<std::string, Checkpoint>& checkpoints,
                                                   const DatasetManifest& manifest,
                                                   const CacheIndex& cache,
                                                   const std::vector<std::size_t>& sizes,
                                                   const MergeStrategy& merge) {
  if (checkpoints.empty()) throw ValidationError("grid sweep needs at least one trained checkpoint");
  std::map<std::size_t, ExperimentReport> out;
  for (const auto n : sizes) {
    if (n == 0) throw ValidationError("grid sizes must be positive");
    std::map<std::string, double> per_source;
    for (const auto& [source, ckpt] : checkpoints) {
      if (ckpt.config.mode != PromptMode::grid_points) {
        throw ValidationError("grid sweep needs grid_points checkpoints; '" + source +
                              "' was trained with " + to_string(ckpt.config.mode));
      }
      const EvalPlan plan = leave_one_site_out(manifest, source, ckpt.config.seed, ckpt.config.split);
      const auto v = evaluate_targets(ckpt, plan, manifest, cache, merge, n, nullptr);
      per_source.insert(v.begin(), v.end());
    }
    out.emplace(n, aggregate("grid " + std::to_string(n) + "x" + std::to_string(n), per_source));
  }
  return out;
}

std::string format_report_csv(const std::vector<ExperimentReport>& reports) {
  if (reports.empty()) throw ValidationError("no reports to format");
  std::vector<std::string> sites;
  for (const auto& [site, v] : reports.front().per_source) sites.push_back(site);
  std::ostringstream o;
  o << "Method";
  for (const auto& s : sites) o << ',' << s << " to Rest";
  o << ",Overall\n";
  for (const auto& r : reports) {
    if (r.per_source.size() != sites.size()) {
      throw ValidationError("report '" + r.method + "' covers a different set of sites");
    }
    o << r.method;
    for (const auto& s : sites) {
      const auto it = r.per_source.find(s);
      if (it == r.per_source.end()) {
        throw ValidationError("report '" + r.method + "' lacks site '" + s + "'");
      }
      o << ',' << format_percent(it->second);
    }
    o << ',' << format_percent(r.overall) << '\n';
  }
  return o.str();
}

void emit_report(const std::vector<ExperimentReport>& reports, const std::filesystem::path& path) {
  io::write_text(path, format_report_csv(reports));
}

std::vector<Rgb> render_overlay(const Image& image, const Mask& truth, const Mask& pred) {
  if (image.height != truth.height || image.width != truth.width || pred.height != truth.height ||
      pred.width != truth.width) {
    throw ShapeError("render_overlay: image, truth and prediction sizes differ");
  }
  std::vector<Rgb> px(image.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const bool p = pred.data[i] != 0, t = truth.data[i] != 0;
    if (p && t) {
      px[i] = kBothColor;
    } else if (p) {
      px[i] = kPredColor;
    } else if (t) {
      px[i] = kTruthColor;
    } else {
      const double v = std::clamp(static_cast<double>(image.data[i]), 0.0, 1.0);
      const auto g = static_cast<std::uint8_t>(std::lround(v * 255.0));
      px[i] = {g, g, g};
    }
  }
  return px;
}

void emit_overlay(const SegmentationSample& sample, const Mask& pred, const std::filesystem::path& path) {
  const auto px = render_overlay(sample.image, sample.mask, pred);
  const std::string header =
      "P6\n" + std::to_string(sample.image.width) + " " + std::to_string(sample.image.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (const auto& c : px) {
    bytes.push_back(c.r);
    bytes.push_back(c.g);
    bytes.push_back(c.b);
  }
  io::write_file(path, bytes);
}

}  // namespace desam
