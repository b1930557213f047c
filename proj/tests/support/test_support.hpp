// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the test binaries: scratch directories, the desk-scale
// model configuration and a central-difference gradient oracle.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include "desam/autograd.hpp"
#include "desam/dataset_io.hpp"
#include "desam/encoder_cache.hpp"
#include "desam/random.hpp"
#include "desam/synthetic.hpp"
#include "desam/tensor.hpp"
#include "desam/trainer.hpp"

namespace desam::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("desam_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal() * scale;
  return t;
}

inline Mask random_mask(std::size_t h, std::size_t w, Rng& rng, double p = 0.5) {
  Mask m(h, w);
  for (auto& v : m.data) v = rng.uniform() < p ? 1 : 0;
  return m;
}

// Small encoder and model used by training-level tests: grid 8 embeddings of
// 32x32 images, two taps, token width 16.
inline EncoderSpec desk_encoder() {
  EncoderSpec s;
  s.name = "standin";
  s.tap_layers = {1, 2};
  s.tap_channels = 16;
  s.final_channels = 16;
  s.grid = 8;
  return s;
}

inline TrainConfig desk_config() {
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.batch_size = 8;
  c.epochs = 10;
  c.seed = 1;
  c.model.image_size = 32;
  c.model.prim.token_dim = 16;
  c.model.prim.n_layers = 2;
  c.model.prim.n_heads = 2;
  c.model.prim.mlp_dim = 32;
  c.model.prim.iou_head_depth = 3;
  c.model.pimm.stage_widths = {16, 16, 8};
  c.model.pimm.blocks_per_stage = 1;
  c.model.pimm.se_reduction = 4;
  c.eval_grid = 3;
  return c;
}

inline constexpr std::uint64_t kDeskEncoderSeed = 7;

/// Synthetic dataset plus its embedding cache, written into `dir`.
struct DeskData {
  DatasetManifest manifest;
  CacheIndex cache;
};

inline DeskData make_desk_data(const std::filesystem::path& dir, const SyntheticOptions& options) {
  DeskData d;
  d.manifest = load_manifest(write_synthetic_dataset(dir, options));
  StandinEncoder enc(desk_encoder(), kDeskEncoderSeed);
  d.cache = precompute_embeddings(enc, d.manifest.records, options.image_size, dir / "cache.dsec");
  return d;
}

// ---------------------------------------------------------------------------
// Pixel-counting oracles, written against the definitions rather than the
// library code: count each Venn region separately, then form the ratio.

struct VennCounts {
  std::size_t both = 0, only_a = 0, only_b = 0;
};

inline VennCounts venn(const Mask& a, const Mask& b) {
  VennCounts v;
  for (std::size_t y = 0; y < a.height; ++y)
    for (std::size_t x = 0; x < a.width; ++x) {
      const bool pa = a.at(y, x) == 1, pb = b.at(y, x) == 1;
      if (pa && pb) ++v.both;
      else if (pa) ++v.only_a;
      else if (pb) ++v.only_b;
    }
  return v;
}

inline double oracle_dice(const Mask& a, const Mask& b) {
  const auto v = venn(a, b);
  const std::size_t total = 2 * v.both + v.only_a + v.only_b;
  if (total == 0) return 1.0;
  return static_cast<double>(2 * v.both) / static_cast<double>(total);
}

inline double oracle_iou(const Mask& a, const Mask& b) {
  const auto v = venn(a, b);
  const std::size_t uni = v.both + v.only_a + v.only_b;
  if (uni == 0) return 1.0;
  return static_cast<double>(v.both) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Gradient oracle

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor): relative error with a floor so that
/// vanishing gradients compare on an absolute scale.
inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor});
}

using ScalarFn = std::function<ag::Var(ag::Tape&, const ag::Binder&)>;

/// Compares reverse-mode gradients of `fn` w.r.t. every element of `params`
/// with central differences. `fn` must build a single-element output.
inline GradCheckResult check_gradients(const std::vector<std::pair<std::string, Tensor*>>& params,
                                       const ScalarFn& fn, double h = 1e-5,
                                       std::size_t max_per_tensor = 0) {
  std::vector<Tensor> analytic;
  {
    ag::Tape tape;
    const ag::Binder bind(tape, true);
    const ag::Var out = fn(tape, bind);
    tape.backward(out);
    for (const auto& [name, p] : params) {
      const Tensor* g = tape.grad_of(*p);
      analytic.push_back(g ? *g : Tensor::zeros_like(*p));
    }
  }
  auto eval = [&] {
    ag::Tape tape;
    const ag::Binder bind(tape, false);
    return fn(tape, bind).value()[0];
  };
  GradCheckResult r;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k].second;
    const std::size_t n = max_per_tensor ? std::min(max_per_tensor, p.size()) : p.size();
    const std::size_t stride = std::max<std::size_t>(1, p.size() / std::max<std::size_t>(n, 1));
    for (std::size_t i = 0; i < p.size(); i += stride) {
      const double orig = p[i];
      p[i] = orig + h;
      const double up = eval();
      p[i] = orig - h;
      const double down = eval();
      p[i] = orig;
      const double num = (up - down) / (2.0 * h);
      const double e = rel_error(analytic[k][i], num);
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = params[k].first + "[" + std::to_string(i) + "] analytic " +
                  std::to_string(analytic[k][i]) + " numeric " + std::to_string(num);
      }
    }
  }
  return r;
}

}  // namespace desam::testing
