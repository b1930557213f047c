// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <span>

#include "desam/binary_io.hpp"
#include "desam/error.hpp"
#include "desam/random.hpp"

namespace desam {

namespace {

std::uint64_t site_tag(const std::string& site) {
  return io::crc32(std::span(reinterpret_cast<const std::uint8_t*>(site.data()), site.size()));
}

}  // namespace

SiteStyle site_style(const std::string& site, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, site_tag(site)));
  SiteStyle s;
  s.background = rng.uniform(0.05, 0.35);
  s.foreground = std::min(0.95, s.background + rng.uniform(0.35, 0.55));
  s.distractor = s.background + rng.uniform(0.4, 0.7) * (s.foreground - s.background);
  s.noise = rng.uniform(0.02, 0.06);
  return s;
}

std::string to_string(Distractor d) {
  switch (d) {
    case Distractor::none: return "none";
    case Distractor::square: return "square";
    case Distractor::dimmer_ellipse: return "dimmer_ellipse";
  }
  return "none";
}

Distractor parse_distractor(const std::string& s) {
  if (s == "none") return Distractor::none;
  if (s == "square") return Distractor::square;
  if (s == "dimmer_ellipse") return Distractor::dimmer_ellipse;
  throw FormatError("unknown distractor '" + s + "' (expected none, square or dimmer_ellipse)");
}

namespace {

struct Ellipse {
  double cx, cy, ax, ay, ct, st;

  static Ellipse draw(Rng& rng, double s, double lo, double hi) {
    Ellipse e;
    e.cx = rng.uniform(lo, hi) * s;
    e.cy = rng.uniform(lo, hi) * s;
    e.ax = rng.uniform(0.10, 0.22) * s;
    e.ay = rng.uniform(0.10, 0.22) * s;
    const double th = rng.uniform(0.0, 3.14159265358979323846);
    e.ct = std::cos(th);
    e.st = std::sin(th);
    return e;
  }

  bool contains(double x, double y, double grow = 1.0) const {
    const double px = x - cx, py = y - cy;
    const double u = (ct * px + st * py) / (ax * grow), v = (-st * px + ct * py) / (ay * grow);
    return u * u + v * v <= 1.0;
  }

  double reach() const { return std::max(ax, ay); }
};

}  // namespace

SegmentationSample make_synthetic_sample(const std::string& site, std::size_t index,
                                         const SyntheticOptions& options) {
  const std::size_t n = options.image_size;
  if (n < 8) throw ValidationError("synthetic images must be at least 8x8");
  const SiteStyle style = site_style(site, options.seed);
  Rng rng(Rng::mix(Rng::mix(options.seed, site_tag(site)), index + 1));
  const double s = static_cast<double>(n);

  double fg = style.foreground, other = style.distractor;
  Ellipse target{}, second{};
  double bx0 = 0, by0 = 0, bx1 = 0, by1 = 0;
  switch (options.distractor) {
    case Distractor::none:
      target = Ellipse::draw(rng, s, 0.3, 0.7);
      break;
    case Distractor::square: {
      target = Ellipse::draw(rng, s, 0.3, 0.7);
      const double side = rng.uniform(0.12, 0.18) * s;
      const bool right = rng.below(2) == 1, bottom = rng.below(2) == 1;
      bx0 = right ? s - side - 1.0 : 1.0;
      by0 = bottom ? s - side - 1.0 : 1.0;
      bx1 = bx0 + side;
      by1 = by0 + side;
      break;
    }
    case Distractor::dimmer_ellipse: {
      // Two ellipses in opposite halves; the brighter one is the target and
      // the absolute levels move per image.
      Ellipse a = Ellipse::draw(rng, s, 0.22, 0.78), b = Ellipse::draw(rng, s, 0.22, 0.78);
      const bool horizontal = rng.below(2) == 1;
      auto place = [&](Ellipse& e, bool first) {
        double& c = horizontal ? e.cx : e.cy;
        c = (first ? rng.uniform(0.2, 0.3) : rng.uniform(0.7, 0.8)) * s;
      };
      place(a, true);
      place(b, false);
      const bool a_is_target = rng.below(2) == 1;
      target = a_is_target ? a : b;
      second = a_is_target ? b : a;
      const double span = style.foreground - style.background;
      fg = style.background + span * rng.uniform(0.7, 1.0);
      other = style.background + span * rng.uniform(0.35, 0.6);
      break;
    }
  }

  SegmentationSample out;
  out.sample_id = site + "_" + std::to_string(index);
  out.site = site;
  out.image = Image(n, n);
  out.mask = Mask(n, n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
      const bool in_target = target.contains(fx, fy);
      bool in_other = false;
      if (options.distractor == Distractor::square) {
        in_other = fx >= bx0 && fx < bx1 && fy >= by0 && fy < by1;
      } else if (options.distractor == Distractor::dimmer_ellipse) {
        in_other = second.contains(fx, fy);
      }
      double val = style.background;
      if (in_other) val = other;
      if (in_target) val = fg;
      val += rng.normal() * style.noise;
      out.image.at(y, x) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      out.mask.at(y, x) = in_target ? 1 : 0;
    }
  return out;
}

std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir,
                                              const SyntheticOptions& options) {
  if (options.sites.empty()) throw ValidationError("synthetic dataset needs at least one site");
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::vector<SampleRecord> records;
  for (const auto& site : options.sites) {
    for (std::size_t i = 0; i < options.samples_per_site; ++i) {
      const auto sample = make_synthetic_sample(site, i, options);
      SampleRecord r;
      r.sample_id = sample.sample_id;
      r.site = site;
      r.image_path = std::filesystem::path("images") / (sample.sample_id + ".dsim");
      r.mask_path = std::filesystem::path("masks") / (sample.sample_id + ".dsim");
      write_image(dir / r.image_path, sample.image);
      write_mask(dir / r.mask_path, sample.mask);
      records.push_back(std::move(r));
    }
  }
  const auto manifest = dir / "manifest.csv";
  write_manifest(manifest, records);
  return manifest;
}

}  // namespace desam
