// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "desam/binary_io.hpp"
#include "desam/error.hpp"
#include "desam/random.hpp"

namespace desam {

namespace {

constexpr char kRasterMagic[4] = {'D', 'S', 'I', 'M'};
constexpr std::uint32_t kRasterVersion = 1;
constexpr std::uint8_t kKindImage = 0;
constexpr std::uint8_t kKindMask = 1;

struct RasterHeader {
  std::size_t height;
  std::size_t width;
  std::uint8_t kind;
};

io::Bytes raster_header(std::size_t h, std::size_t w, std::uint8_t kind) {
  io::ByteWriter out;
  out.raw(std::string_view(kRasterMagic, 4));
  out.u32(kRasterVersion);
  out.u32(static_cast<std::uint32_t>(h));
  out.u32(static_cast<std::uint32_t>(w));
  out.u8(kind);
  return out.take();
}

RasterHeader parse_raster_header(io::ByteReader& in, const std::filesystem::path& path) {
  try {
    auto magic = in.raw(4);
    if (!std::equal(magic.begin(), magic.end(), kRasterMagic)) {
      throw FormatError(path.string() + ": not a raster file (bad magic)");
    }
    if (auto v = in.u32(); v != kRasterVersion) {
      throw FormatError(path.string() + ": unsupported raster version " + std::to_string(v));
    }
    RasterHeader h{};
    h.height = in.u32();
    h.width = in.u32();
    h.kind = in.u8();
    return h;
  } catch (const CorruptionError&) {
    throw FormatError(path.string() + ": truncated raster header");
  }
}

}  // namespace

const SampleRecord& DatasetManifest::find(const std::string& sample_id) const {
  for (const auto& r : records) {
    if (r.sample_id == sample_id) return r;
  }
  throw NotFoundError("sample id not in manifest: " + sample_id);
}

std::vector<std::string> DatasetManifest::ids_for_site(const std::string& site) const {
  std::vector<std::string> ids;
  for (const auto& r : records) {
    if (r.site == site) ids.push_back(r.sample_id);
  }
  return ids;
}

DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir,
                               bool check_resources) {
  DatasetManifest m;
  std::unordered_set<std::string> seen;
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const std::string t = io::trim(line);
    if (t.empty() || t.front() == '#') continue;
    auto fields = io::split(t, ',');
    const std::string where = "manifest line " + std::to_string(lineno);
    if (fields.size() != 4) {
      throw FormatError(where + ": expected 4 comma-separated fields, got " +
                        std::to_string(fields.size()));
    }
    for (auto& f : fields) {
      f = io::trim(f);
      if (f.empty()) throw FormatError(where + ": empty field");
    }
    SampleRecord r{fields[0], fields[1], fields[2], fields[3]};
    if (r.image_path.is_relative()) r.image_path = base_dir / r.image_path;
    if (r.mask_path.is_relative()) r.mask_path = base_dir / r.mask_path;
    if (!seen.insert(r.sample_id).second) {
      throw ValidationError(where + ": duplicate sample_id '" + r.sample_id + "'");
    }
    if (check_resources) {
      for (const auto& p : {r.image_path, r.mask_path}) {
        if (!std::filesystem::is_regular_file(p)) {
          throw ValidationError(where + ": dangling resource path " + p.string());
        }
      }
    }
    m.sites.insert(r.site);
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw IoError("manifest not found: " + path.string());
  }
  return parse_manifest(io::read_text(path), path.parent_path());
}

void write_manifest(const std::filesystem::path& path, const std::vector<SampleRecord>& records) {
  std::ostringstream os;
  os << "# sample_id,site,image_path,mask_path\n";
  const auto base = path.parent_path();
  for (const auto& r : records) {
    auto rel = [&](const std::filesystem::path& p) {
      if (p.is_relative()) return p.generic_string();
      return std::filesystem::relative(p, base.empty() ? std::filesystem::current_path() : base)
          .generic_string();
    };
    os << r.sample_id << ',' << r.site << ',' << rel(r.image_path) << ',' << rel(r.mask_path)
       << '\n';
  }
  io::write_text(path, os.str());
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_train_val(
    const DatasetManifest& manifest, const std::string& site, SplitRatio ratio,
    std::uint64_t seed) {
  if (!manifest.sites.contains(site)) throw NotFoundError("unknown site: " + site);
  if (ratio.train == 0 || ratio.val == 0) {
    throw ValidationError("split ratio components must be positive");
  }
  auto ids = manifest.ids_for_site(site);
  if (ids.size() < 2) {
    throw ValidationError("site " + site + " has " + std::to_string(ids.size()) +
                          " samples; at least 2 are needed for a train/val split");
  }
  // Manifest order must not influence the split.
  std::sort(ids.begin(), ids.end());
  Rng rng(Rng::mix(seed, io::crc32({reinterpret_cast<const std::uint8_t*>(site.data()), site.size()})));
  rng.shuffle(ids);

  const std::size_t n = ids.size();
  const std::size_t n_val =
      std::max<std::size_t>(1, n * ratio.val / (ratio.train + ratio.val));
  std::vector<std::string> val(ids.end() - static_cast<std::ptrdiff_t>(n_val), ids.end());
  ids.resize(n - n_val);
  return {std::move(ids), std::move(val)};
}

EvalPlan leave_one_site_out(const DatasetManifest& manifest, const std::string& source_site,
                            std::uint64_t seed, SplitRatio ratio) {
  if (!manifest.sites.contains(source_site)) {
    throw NotFoundError("unknown source site: " + source_site);
  }
  if (manifest.sites.size() < 2) {
    throw ValidationError("leave-one-site-out needs at least 2 sites");
  }
  EvalPlan plan;
  plan.source_site = source_site;
  std::tie(plan.train_ids, plan.val_ids) = split_train_val(manifest, source_site, ratio, seed);
  for (const auto& site : manifest.sites) {
    if (site == source_site) continue;
    plan.target_sites[site] = manifest.ids_for_site(site);
  }
  return plan;
}

void write_image(const std::filesystem::path& path, const Image& image) {
  io::ByteWriter out;
  out.raw(raster_header(image.height, image.width, kKindImage));
  for (float v : image.data) out.f32(v);
  io::write_file(path, out.bytes());
}

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  io::ByteWriter out;
  out.raw(raster_header(mask.height, mask.width, kKindMask));
  out.raw(std::span<const std::uint8_t>(mask.data));
  io::write_file(path, out.bytes());
}

Image read_image(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader in(bytes);
  const auto h = parse_raster_header(in, path);
  if (h.kind != kKindImage) throw FormatError(path.string() + ": raster is not an image");
  if (in.remaining() != h.height * h.width * 4) {
    throw FormatError(path.string() + ": image payload size mismatch");
  }
  Image img(h.height, h.width);
  for (auto& v : img.data) v = in.f32();
  return img;
}

Mask read_mask(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader in(bytes);
  const auto h = parse_raster_header(in, path);
  if (h.kind != kKindMask) throw FormatError(path.string() + ": raster is not a mask");
  if (in.remaining() != h.height * h.width) {
    throw FormatError(path.string() + ": mask payload size mismatch");
  }
  Mask m(h.height, h.width);
  auto payload = in.raw(h.height * h.width);
  std::copy(payload.begin(), payload.end(), m.data.begin());
  return m;
}

namespace {

void check_size(std::size_t h, std::size_t w, std::size_t expected, const SampleRecord& r,
                const char* what) {
  if (h != expected || w != expected) {
    throw ValidationError(r.sample_id + ": " + what + " is " + std::to_string(h) + "x" +
                          std::to_string(w) + ", expected " + std::to_string(expected) + "x" +
                          std::to_string(expected));
  }
}

void check_mask(const Mask& m, const SampleRecord& r) {
  for (auto v : m.data) {
    if (v > 1) {
      throw ValidationError(r.sample_id + ": mask contains non-binary value " +
                            std::to_string(static_cast<int>(v)));
    }
  }
}

}  // namespace

Mask load_mask(const SampleRecord& record, std::size_t expected_size) {
  Mask m = read_mask(record.mask_path);
  check_size(m.height, m.width, expected_size, record, "mask");
  check_mask(m, record);
  return m;
}

SegmentationSample load_sample(const SampleRecord& record, std::size_t expected_size) {
  SegmentationSample s;
  s.sample_id = record.sample_id;
  s.site = record.site;
  s.image = read_image(record.image_path);
  check_size(s.image.height, s.image.width, expected_size, record, "image");
  for (float v : s.image.data) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw ValidationError(record.sample_id + ": intensity " + std::to_string(v) +
                            " outside [0,1]");
    }
  }
  s.mask = load_mask(record, expected_size);
  return s;
}

}  // namespace desam
