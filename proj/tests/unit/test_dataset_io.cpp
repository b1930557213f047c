// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <set>

#include "desam/binary_io.hpp"
#include "desam/dataset_io.hpp"
#include "desam/error.hpp"
#include "test_support.hpp"

using namespace desam;
using desam::testing::TempDir;

namespace {

// Writes `n` valid size x size samples per site and returns the manifest path.
std::filesystem::path write_sites(const TempDir& dir, const std::vector<std::string>& sites,
                                  std::size_t n, std::size_t size = 4) {
  std::vector<SampleRecord> recs;
  for (const auto& site : sites) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::string id = site + std::to_string(i);
      Image img(size, size, 0.5f);
      Mask m(size, size, 0);
      m.at(0, 0) = 1;
      write_image(dir / (id + ".img"), img);
      write_mask(dir / (id + ".msk"), m);
      recs.push_back({id, site, id + ".img", id + ".msk"});
    }
  }
  write_manifest(dir / "manifest.csv", recs);
  return dir / "manifest.csv";
}

std::vector<std::string> sorted(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

TEST_CASE("manifest with two records and one site") {
  TempDir dir("ds");
  const auto m = load_manifest(write_sites(dir, {"A"}, 2));
  CHECK(m.records.size() == 2);
  CHECK(m.sites == std::set<std::string>{"A"});
  CHECK(m.find("A1").site == "A");
  CHECK(m.records[0].image_path.is_absolute());
  CHECK_THROWS_AS(m.find("nope"), NotFoundError);
}

TEST_CASE("six-site manifest lists every site") {
  TempDir dir("ds");
  const auto m = load_manifest(write_sites(dir, {"A", "B", "C", "D", "E", "F"}, 1));
  CHECK(m.sites == std::set<std::string>{"A", "B", "C", "D", "E", "F"});
}

TEST_CASE("manifest errors") {
  TempDir dir("ds");
  write_sites(dir, {"A"}, 1);
  SUBCASE("duplicate id") {
    CHECK_THROWS_AS(parse_manifest("s1,A,A0.img,A0.msk\ns1,A,A0.img,A0.msk\n", dir.path()),
                    ValidationError);
  }
  SUBCASE("malformed record") {
    CHECK_THROWS_AS(parse_manifest("s1,A,A0.img\n", dir.path()), FormatError);
    CHECK_THROWS_AS(parse_manifest("s1,,A0.img,A0.msk\n", dir.path()), FormatError);
  }
  SUBCASE("dangling resource") {
    CHECK_THROWS_AS(parse_manifest("s1,A,nope.img,A0.msk\n", dir.path()), ValidationError);
    CHECK_NOTHROW(parse_manifest("s1,A,nope.img,A0.msk\n", dir.path(), false));
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_manifest(dir / "absent.csv"), IoError); }
}

TEST_CASE("comments and blank lines are skipped") {
  TempDir dir("ds");
  write_sites(dir, {"A"}, 1);
  const auto m = parse_manifest("# header\n\nA0,A,A0.img,A0.msk\n", dir.path());
  CHECK(m.records.size() == 1);
}

TEST_CASE("9:1 split sizes") {
  TempDir dir("ds");
  SUBCASE("10 samples") {
    const auto m = load_manifest(write_sites(dir, {"A"}, 10));
    auto [tr, va] = split_train_val(m, "A", {}, 3);
    CHECK(tr.size() == 9);
    CHECK(va.size() == 1);
  }
  SUBCASE("7 samples") {
    const auto m = load_manifest(write_sites(dir, {"A"}, 7));
    auto [tr, va] = split_train_val(m, "A", {}, 3);
    CHECK(tr.size() == 6);
    CHECK(va.size() == 1);
  }
  SUBCASE("20 samples, same seed twice") {
    const auto m = load_manifest(write_sites(dir, {"A"}, 20));
    CHECK(split_train_val(m, "A", {}, 11) == split_train_val(m, "A", {}, 11));
  }
}

TEST_CASE("split errors") {
  TempDir dir("ds");
  const auto m = load_manifest(write_sites(dir, {"A", "B"}, 1));
  CHECK_THROWS_AS(split_train_val(m, "Z", {}, 0), NotFoundError);
  CHECK_THROWS_AS(split_train_val(m, "A", {}, 0), ValidationError);
  CHECK_THROWS_AS(split_train_val(m, "A", {0, 1}, 0), ValidationError);
}

TEST_CASE("split is a partition for every seed and size") {
  TempDir dir("ds");
  const auto m = load_manifest(write_sites(dir, {"A"}, 23));
  const auto all = sorted(m.ids_for_site("A"));
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto [tr, va] = split_train_val(m, "A", {}, seed);
    std::vector<std::string> both = tr;
    both.insert(both.end(), va.begin(), va.end());
    CHECK(sorted(both) == all);  // exhaustive, and duplicates would change the size
    CHECK(va.size() == std::max<std::size_t>(1, 23 / 10));
  }
}

TEST_CASE("leave-one-site-out plans") {
  TempDir dir("ds");
  const auto m = load_manifest(write_sites(dir, {"A", "B", "C", "D", "E", "F"}, 3));
  SUBCASE("six sites, source A") {
    const auto plan = leave_one_site_out(m, "A", 0);
    CHECK(plan.target_sites.size() == 5);
    CHECK_FALSE(plan.target_sites.contains("A"));
    for (const auto& id : plan.train_ids) CHECK(m.find(id).site == "A");
    for (const auto& id : plan.val_ids) CHECK(m.find(id).site == "A");
  }
  SUBCASE("target sets are disjoint and exclude the source") {
    for (const auto& src : m.sites) {
      const auto plan = leave_one_site_out(m, src, 4);
      std::set<std::string> seen;
      for (const auto& [site, ids] : plan.target_sites) {
        CHECK(site != src);
        for (const auto& id : ids) {
          CHECK(m.find(id).site == site);
          CHECK(seen.insert(id).second);
        }
      }
    }
  }
  SUBCASE("determinism") {
    const auto a = leave_one_site_out(m, "C", 9), b = leave_one_site_out(m, "C", 9);
    CHECK(a.train_ids == b.train_ids);
    CHECK(a.val_ids == b.val_ids);
    CHECK(a.target_sites == b.target_sites);
  }
  SUBCASE("unknown source") { CHECK_THROWS_AS(leave_one_site_out(m, "Q", 0), NotFoundError); }
}

TEST_CASE("two sites, source B") {
  TempDir dir("ds");
  const auto m = load_manifest(write_sites(dir, {"A", "B"}, 2));
  const auto plan = leave_one_site_out(m, "B", 0);
  REQUIRE(plan.target_sites.size() == 1);
  CHECK(plan.target_sites.begin()->first == "A");
}

TEST_CASE("single-site manifest cannot be planned") {
  TempDir dir("ds");
  const auto m = load_manifest(write_sites(dir, {"A"}, 3));
  CHECK_THROWS_AS(leave_one_site_out(m, "A", 0), ValidationError);
}

TEST_CASE("load_sample validation") {
  TempDir dir("ds");
  SampleRecord r{"s", "A", dir / "i", dir / "m"};
  SUBCASE("288 image is accepted") {
    Image img(288, 288, 0.25f);
    img.at(3, 4) = 1.0f;
    Mask m(288, 288, 0);
    m.at(5, 5) = 1;
    write_image(r.image_path, img);
    write_mask(r.mask_path, m);
    const auto s = load_sample(r, 288);
    CHECK(s.image == img);
    CHECK(s.mask == m);
    CHECK(s.site == "A");
  }
  SUBCASE("256 image with expected 288") {
    write_image(r.image_path, Image(256, 256, 0.1f));
    write_mask(r.mask_path, Mask(256, 256, 0));
    CHECK_THROWS_AS(load_sample(r, 288), ValidationError);
  }
  SUBCASE("mask value 2") {
    Mask m(4, 4, 0);
    m.at(1, 1) = 2;
    write_image(r.image_path, Image(4, 4, 0.1f));
    write_mask(r.mask_path, m);
    CHECK_THROWS_AS(load_sample(r, 4), ValidationError);
    CHECK_THROWS_AS(load_mask(r, 4), ValidationError);
  }
  SUBCASE("intensity out of range") {
    Image img(4, 4, 0.1f);
    img.at(2, 2) = 1.5f;
    write_image(r.image_path, img);
    write_mask(r.mask_path, Mask(4, 4, 0));
    CHECK_THROWS_AS(load_sample(r, 4), ValidationError);
  }
  SUBCASE("image read as mask") {
    write_image(r.image_path, Image(4, 4, 0.1f));
    CHECK_THROWS_AS(read_mask(r.image_path), FormatError);
  }
}

TEST_CASE("raster header layout") {
  TempDir dir("ds");
  Mask m(2, 3, 1);
  write_mask(dir / "m", m);
  const auto b = io::read_file(dir / "m");
  REQUIRE(b.size() == 4 + 4 + 4 + 4 + 1 + 6);
  CHECK(std::string(b.begin(), b.begin() + 4) == "DSIM");
  io::ByteReader r(b);
  r.raw(4);
  CHECK(r.u32() == 1);
  CHECK(r.u32() == 2);
  CHECK(r.u32() == 3);
  CHECK(r.u8() == 1);
}

TEST_CASE("load_sample on random files never returns invalid data") {
  TempDir dir("ds");
  Rng rng(17);
  SampleRecord r{"s", "A", dir / "i", dir / "m"};
  std::size_t accepted = 0;
  for (int trial = 0; trial < 300; ++trial) {
    // Start from valid rasters and scramble a few bytes, or write pure noise.
    Image img(4, 4);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    Mask msk(4, 4);
    for (auto& v : msk.data) v = static_cast<std::uint8_t>(rng.below(2));
    write_image(r.image_path, img);
    write_mask(r.mask_path, msk);
    // One file per trial is damaged so the other stays loadable.
    {
      const auto& p = trial % 2 ? r.image_path : r.mask_path;
      auto bytes = io::read_file(p);
      if (trial % 5 == 0) {
        bytes.resize(rng.below(bytes.size() + 8));
        for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.below(256));
      } else {
        for (int k = 0; k < 2; ++k) bytes[rng.below(bytes.size())] = static_cast<std::uint8_t>(rng.below(256));
      }
      io::write_file(p, bytes);
    }
    try {
      const auto s = load_sample(r, 4);
      ++accepted;
      CHECK(s.image.height == 4);
      CHECK(s.image.width == 4);
      for (float v : s.image.data) CHECK((v >= 0.0f && v <= 1.0f));
      for (auto v : s.mask.data) CHECK(v <= 1);
    } catch (const Error&) {
    }
  }
  CHECK(accepted > 0);
}
