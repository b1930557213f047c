// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "desam/error.hpp"
#include "desam/synthetic.hpp"
#include "test_support.hpp"

using namespace desam;

namespace {

std::size_t count_on(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m.data) n += v;
  return n;
}

double mean_where(const SegmentationSample& s, bool in_mask) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.mask.size(); ++i)
    if ((s.mask.data[i] == 1) == in_mask) {
      sum += s.image.data[i];
      ++n;
    }
  return sum / static_cast<double>(n);
}

}  // namespace

TEST_CASE("samples are valid, deterministic and non-trivial") {
  for (auto d : {Distractor::none, Distractor::square, Distractor::dimmer_ellipse}) {
    SyntheticOptions o;
    o.distractor = d;
    for (std::size_t i = 0; i < 10; ++i) {
      const auto s = make_synthetic_sample("B", i, o);
      CHECK(s.sample_id == "B_" + std::to_string(i));
      CHECK(s.image.height == 32);
      for (float v : s.image.data) CHECK((v >= 0.0f && v <= 1.0f));
      const auto on = count_on(s.mask);
      CHECK(on > 10);
      CHECK(on < 32 * 32 / 2);
      CHECK(mean_where(s, true) > mean_where(s, false));
      const auto again = make_synthetic_sample("B", i, o);
      CHECK(again.image == s.image);
      CHECK(again.mask == s.mask);
    }
  }
}

TEST_CASE("sites differ in style") {
  const auto a = site_style("A", 0), b = site_style("B", 0);
  CHECK(a.background != b.background);
  CHECK(a.foreground > a.background);
  CHECK(a.distractor > a.background);
  CHECK(a.distractor < a.foreground);
}

TEST_CASE("dataset on disk loads back") {
  desam::testing::TempDir dir("syn");
  SyntheticOptions o;
  o.sites = {"A", "C"};
  o.samples_per_site = 3;
  const auto m = load_manifest(write_synthetic_dataset(dir.path(), o));
  CHECK(m.records.size() == 6);
  CHECK(m.sites.size() == 2);
  const auto s = load_sample(m.find("C_2"), 32);
  const auto ref = make_synthetic_sample("C", 2, o);
  CHECK(s.image == ref.image);
  CHECK(s.mask == ref.mask);
}

TEST_CASE("option errors") {
  SyntheticOptions o;
  o.image_size = 4;
  CHECK_THROWS_AS(make_synthetic_sample("A", 0, o), ValidationError);
  CHECK(parse_distractor("dimmer_ellipse") == Distractor::dimmer_ellipse);
  CHECK_THROWS_AS(parse_distractor("circle"), FormatError);
}
