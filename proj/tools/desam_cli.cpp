// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

// desam_cli: dataset synthesis, embedding precompute, training, evaluation,
// ablations, grid sweeps and leave-one-site-out summary tables.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <iostream>

#include "desam/binary_io.hpp"
#include "desam/error.hpp"
#include "desam/evaluator.hpp"
#include "desam/synthetic.hpp"

namespace fs = std::filesystem;
using namespace desam;

namespace {

// --cache falls back to $DESAM_CACHE_DIR/embeddings.dsec.
fs::path resolve_cache(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* dir = std::getenv("DESAM_CACHE_DIR"); dir && *dir) return fs::path(dir) / "embeddings.dsec";
  throw ValidationError("no cache given: pass --cache or set DESAM_CACHE_DIR");
}

MergeStrategy merge_from(const std::string& kind, double threshold) {
  MergeStrategy m{parse_merge_kind(kind), threshold};
  m.validate();
  return m;
}

std::map<std::string, Checkpoint> load_checkpoints(const std::vector<std::string>& paths) {
  std::map<std::string, Checkpoint> out;
  for (const auto& p : paths) {
    auto ckpt = load_checkpoint(p);
    const auto site = ckpt.source_site;
    if (!out.emplace(site, std::move(ckpt)).second) {
      throw ValidationError("two checkpoints trained on site '" + site + "'");
    }
  }
  return out;
}

void write_or_print(const std::vector<ExperimentReport>& reports, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << format_report_csv(reports);
  } else {
    emit_report(reports, path);
    std::cout << "wrote " << path << "\n";
  }
}

void write_train_log(const TrainResult& r, const fs::path& path) {
  std::string text = "step,epoch,lr,dice,ce,mse,total\n";
  char line[256];
  for (const auto& s : r.log) {
    std::snprintf(line, sizeof line, "%zu,%zu,%.6g,%.6f,%.6f,%s,%.6f\n", s.step, s.epoch, s.lr, s.loss.dice,
                  s.loss.ce, s.loss.mse ? std::to_string(*s.loss.mse).c_str() : "", s.loss.total);
    text += line;
  }
  io::write_text(path, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Promptable segmentation with a prompt-invariant mask decoder"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic multi-site dataset and manifest");
  std::string synth_out, synth_distractor = "square", synth_sites = "A,B,C";
  SyntheticOptions synth_opts;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--sites", synth_sites, "Comma-separated site labels")->capture_default_str();
  synth->add_option("--per-site", synth_opts.samples_per_site, "Samples per site")->capture_default_str();
  synth->add_option("--size", synth_opts.image_size, "Image side length")->capture_default_str();
  synth->add_option("--seed", synth_opts.seed, "Generator seed")->capture_default_str();
  synth->add_option("--distractor", synth_distractor, "none, square or dimmer_ellipse")->capture_default_str();

  // precompute
  auto* pre = app.add_subcommand("precompute", "Encode every manifest image into the embedding cache");
  std::string pre_manifest, pre_encoder, pre_out;
  std::uint64_t pre_seed = 0;
  std::size_t pre_size = kDefaultImageSize;
  pre->add_option("--manifest", pre_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  pre->add_option("--encoder", pre_encoder, "Encoder spec, e.g. standin:grid=8,taps=1/2,tap_channels=16,final_channels=16")
      ->required();
  pre->add_option("--seed", pre_seed, "Stand-in encoder seed")->capture_default_str();
  pre->add_option("--image-size", pre_size, "Expected image side length")->capture_default_str();
  pre->add_option("--out", pre_out, "Cache file (default $DESAM_CACHE_DIR/embeddings.dsec)");

  // train
  auto* tr = app.add_subcommand("train", "Train on one source site and save the best checkpoint");
  std::string tr_config, tr_site, tr_cache, tr_out, tr_manifest, tr_log;
  tr->add_option("--config", tr_config, "key = value training config")->required()->check(CLI::ExistingFile);
  tr->add_option("--site", tr_site, "Source site")->required();
  tr->add_option("--manifest", tr_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--cache", tr_cache, "Embedding cache (default $DESAM_CACHE_DIR/embeddings.dsec)");
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr->add_option("--log", tr_log, "Optional per-step loss log (CSV)");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate one checkpoint on every other site");
  std::string ev_ckpt, ev_manifest, ev_cache, ev_merge = "mean_probability", ev_report, ev_overlays;
  std::size_t ev_grid = 9;
  double ev_threshold = 0.5;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", ev_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--cache", ev_cache, "Embedding cache (default $DESAM_CACHE_DIR/embeddings.dsec)");
  ev->add_option("--grid", ev_grid, "Points per side in grid mode")->capture_default_str()->check(CLI::PositiveNumber);
  ev->add_option("--merge", ev_merge, "mean_probability, max_probability, union_binary or iou_weighted")
      ->capture_default_str();
  ev->add_option("--threshold", ev_threshold, "Probability threshold")->capture_default_str();
  ev->add_option("--report", ev_report, "Report CSV path ('-' for stdout)");
  ev->add_option("--overlays", ev_overlays, "Directory for PPM overlays of each prediction");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Leave-one-site-out run of one ablation variant");
  std::string ab_variant, ab_config, ab_manifest, ab_cache, ab_report;
  ab->add_option("--variant", ab_variant, "pimm_only, no_iou_head, no_mask_fusion or full")
      ->required()
      ->check(CLI::IsMember({"pimm_only", "no_iou_head", "no_mask_fusion", "full"}));
  ab->add_option("--config", ab_config, "Training config")->required()->check(CLI::ExistingFile);
  ab->add_option("--manifest", ab_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  ab->add_option("--cache", ab_cache, "Embedding cache (default $DESAM_CACHE_DIR/embeddings.dsec)");
  ab->add_option("--report", ab_report, "Report CSV path ('-' for stdout)");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Evaluate trained checkpoints across grid sizes");
  std::vector<std::size_t> sw_sizes;
  std::vector<std::string> sw_ckpts;
  std::string sw_manifest, sw_cache, sw_report, sw_merge = "mean_probability";
  sw->add_option("--sizes", sw_sizes, "Grid sizes, e.g. 1,5,9")->required()->delimiter(',');
  sw->add_option("--checkpoints", sw_ckpts, "One checkpoint per source site")->required()->check(CLI::ExistingFile);
  sw->add_option("--manifest", sw_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  sw->add_option("--cache", sw_cache, "Embedding cache (default $DESAM_CACHE_DIR/embeddings.dsec)");
  sw->add_option("--merge", sw_merge, "Merge strategy")->capture_default_str();
  sw->add_option("--report", sw_report, "Report CSV path ('-' for stdout)");

  // report
  auto* rp = app.add_subcommand("report", "Summary row from one checkpoint per source site");
  std::string rp_format = "csv", rp_manifest, rp_cache, rp_method = "DeSAM", rp_out, rp_merge = "mean_probability";
  std::vector<std::string> rp_ckpts;
  std::size_t rp_grid = 9;
  rp->add_option("--format", rp_format, "Output format")->capture_default_str()->check(CLI::IsMember({"csv"}));
  rp->add_option("--checkpoints", rp_ckpts, "One checkpoint per source site")->required()->check(CLI::ExistingFile);
  rp->add_option("--manifest", rp_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  rp->add_option("--cache", rp_cache, "Embedding cache (default $DESAM_CACHE_DIR/embeddings.dsec)");
  rp->add_option("--grid", rp_grid, "Points per side in grid mode")->capture_default_str();
  rp->add_option("--merge", rp_merge, "Merge strategy")->capture_default_str();
  rp->add_option("--method", rp_method, "Row label")->capture_default_str();
  rp->add_option("--out", rp_out, "Output path ('-' for stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      synth_opts.sites = io::split(synth_sites, ',');
      synth_opts.distractor = parse_distractor(synth_distractor);
      const auto manifest = write_synthetic_dataset(synth_out, synth_opts);
      std::cout << "wrote " << manifest.string() << "\n";
    } else if (*pre) {
      const auto manifest = load_manifest(pre_manifest);
      const StandinEncoder encoder(EncoderSpec::parse(pre_encoder), pre_seed);
      const auto out = resolve_cache(pre_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      const auto index = precompute_embeddings(encoder, manifest.records, pre_size, out);
      std::cout << "cached " << index.entries.size() << " samples in " << out.string() << " ("
                << index.spec.to_string() << ")\n";
    } else if (*tr) {
      const auto config = TrainConfig::load(tr_config);
      const auto manifest = load_manifest(tr_manifest);
      const auto cache = open_cache(resolve_cache(tr_cache));
      const auto plan = leave_one_site_out(manifest, tr_site, config.seed, config.split);
      const auto result = train(config, plan, cache, manifest);
      save_checkpoint(result.best, tr_out);
      if (!tr_log.empty()) write_train_log(result, tr_log);
      const auto& hist = result.best.val_dice_history;
      std::printf("trained on %s: %zu steps, best epoch %zu, val dice %.4f\n", tr_site.c_str(), result.log.size(),
                  result.best.epoch, hist.empty() ? 0.0 : *std::max_element(hist.begin(), hist.end()));
      std::cout << "wrote " << tr_out << "\n";
    } else if (*ev) {
      const auto ckpt = load_checkpoint(ev_ckpt);
      const auto manifest = load_manifest(ev_manifest);
      const auto cache = open_cache(resolve_cache(ev_cache));
      const auto merge = merge_from(ev_merge, ev_threshold);
      std::vector<double> site_means;
      for (const auto& site : manifest.sites) {
        if (site == ckpt.source_site) continue;
        const auto ids = manifest.ids_for_site(site);
        const auto rep = evaluate_site(ckpt, site, ids, manifest, cache, merge, ev_grid);
        site_means.push_back(rep.mean_percent);
        std::cout << ckpt.source_site << " -> " << site << ": " << format_percent(rep.mean_percent) << " ("
                  << ids.size() << " samples)\n";
        if (!ev_overlays.empty()) {
          fs::create_directories(ev_overlays);
          for (const auto& id : ids) {
            const auto sample = load_sample(manifest.find(id), ckpt.config.model.image_size);
            const auto prompts = ckpt.config.mode == PromptMode::grid_points
                                     ? grid_points(ev_grid, ckpt.config.model.image_size)
                                     : whole_image_box(ckpt.config.model.image_size);
            const auto pred = predict_sample(ckpt, load_embeddings(cache, id), prompts, merge);
            emit_overlay(sample, pred, fs::path(ev_overlays) / (id + ".ppm"));
          }
        }
      }
      if (site_means.empty()) throw ValidationError("manifest has no site other than the source");
      const auto report = aggregate("DeSAM", {{ckpt.source_site, overall_of(site_means)}});
      if (!ev_report.empty()) write_or_print({report}, ev_report);
      std::cout << ckpt.source_site << " to Rest: " << format_percent(report.overall) << "\n";
    } else if (*ab) {
      const auto config = TrainConfig::load(ab_config);
      const auto manifest = load_manifest(ab_manifest);
      const auto cache = open_cache(resolve_cache(ab_cache));
      const auto run = run_ablation(config, parse_ablation_variant(ab_variant), manifest, cache);
      write_or_print({run.report}, ab_report);
    } else if (*sw) {
      const auto manifest = load_manifest(sw_manifest);
      const auto cache = open_cache(resolve_cache(sw_cache));
      const auto sweep = grid_sweep(load_checkpoints(sw_ckpts), manifest, cache, sw_sizes, merge_from(sw_merge, 0.5));
      std::vector<ExperimentReport> rows;
      for (const auto& [n, rep] : sweep) rows.push_back(rep);
      write_or_print(rows, sw_report);
    } else if (*rp) {
      const auto manifest = load_manifest(rp_manifest);
      const auto cache = open_cache(resolve_cache(rp_cache));
      auto sweep = grid_sweep(load_checkpoints(rp_ckpts), manifest, cache, {rp_grid}, merge_from(rp_merge, 0.5));
      auto row = sweep.at(rp_grid);
      row.method = rp_method;
      write_or_print({row}, rp_out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
