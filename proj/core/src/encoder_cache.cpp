// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/encoder_cache.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "desam/binary_io.hpp"
#include "desam/error.hpp"
#include "desam/random.hpp"

namespace desam {

namespace {

constexpr char kCacheMagic[4] = {'D', 'S', 'E', 'C'};
constexpr std::uint32_t kCacheVersion = 1;

std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::logic_error&) {
    throw FormatError("encoder spec: bad value for " + key + ": '" + v + "'");
  }
}

void write_spec(io::ByteWriter& out, const EncoderSpec& spec) {
  out.str(spec.name);
  out.u32(static_cast<std::uint32_t>(spec.tap_layers.size()));
  for (auto t : spec.tap_layers) out.u32(t);
  out.u32(static_cast<std::uint32_t>(spec.tap_channels));
  out.u32(static_cast<std::uint32_t>(spec.final_channels));
  out.u32(static_cast<std::uint32_t>(spec.grid));
}

EncoderSpec read_spec(io::ByteReader& in) {
  EncoderSpec spec;
  spec.name = in.str();
  const auto n = in.u32();
  if (n > 4096) throw CorruptionError("implausible tap count in cache header");
  spec.tap_layers.resize(n);
  for (auto& t : spec.tap_layers) t = in.u32();
  spec.tap_channels = in.u32();
  spec.final_channels = in.u32();
  spec.grid = in.u32();
  spec.validate();
  return spec;
}

io::Bytes encode_record(const ImageEmbeddingSet& e) {
  io::ByteWriter out;
  out.str(e.sample_id);
  out.u32(static_cast<std::uint32_t>(e.taps.size() + 1));
  for (const auto& t : e.taps) out.u64(t.data.size() * 4);
  out.u64(e.final.data.size() * 4);
  for (const auto& t : e.taps)
    for (float v : t.data) out.f32(v);
  for (float v : e.final.data) out.f32(v);
  out.u32(io::crc32(out.bytes()));
  return out.take();
}

FeatureMap read_map(io::ByteReader& in, std::uint64_t bytes, std::size_t c, std::size_t g) {
  FeatureMap m(c, g, g);
  if (bytes != m.data.size() * 4) throw CorruptionError("payload length does not match spec");
  for (auto& v : m.data) v = in.f32();
  return m;
}

// Adaptive average pooling bin [begin, end) for output cell i.
std::pair<std::size_t, std::size_t> pool_bin(std::size_t i, std::size_t in, std::size_t out) {
  const std::size_t b = i * in / out;
  const std::size_t e = ((i + 1) * in + out - 1) / out;
  return {b, std::max(e, b + 1)};
}

}  // namespace

void EncoderSpec::validate() const {
  if (tap_layers.empty()) throw ValidationError("encoder spec needs at least one tap layer");
  for (std::size_t i = 1; i < tap_layers.size(); ++i) {
    if (tap_layers[i] <= tap_layers[i - 1]) {
      throw ValidationError("encoder tap layers must be strictly increasing");
    }
  }
  if (tap_channels == 0 || final_channels == 0 || grid == 0) {
    throw ValidationError("encoder channel and grid sizes must be positive");
  }
}

std::string EncoderSpec::to_string() const {
  std::ostringstream os;
  os << name << ":grid=" << grid << ",taps=";
  for (std::size_t i = 0; i < tap_layers.size(); ++i) os << (i ? "/" : "") << tap_layers[i];
  os << ",tap_channels=" << tap_channels << ",final_channels=" << final_channels;
  return os.str();
}

EncoderSpec EncoderSpec::parse(const std::string& text) {
  EncoderSpec spec;
  const auto colon = text.find(':');
  spec.name = io::trim(text.substr(0, colon));
  if (spec.name.empty()) throw FormatError("encoder spec: empty name");
  if (colon != std::string::npos) {
    for (const auto& kv : io::split(text.substr(colon + 1), ',')) {
      if (io::trim(kv).empty()) continue;
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw FormatError("encoder spec: expected key=value, got " + kv);
      const auto key = io::trim(kv.substr(0, eq));
      const auto val = io::trim(kv.substr(eq + 1));
      if (key == "grid") {
        spec.grid = parse_size(key, val);
      } else if (key == "tap_channels") {
        spec.tap_channels = parse_size(key, val);
      } else if (key == "final_channels") {
        spec.final_channels = parse_size(key, val);
      } else if (key == "taps") {
        spec.tap_layers.clear();
        for (const auto& t : io::split(val, '/')) {
          spec.tap_layers.push_back(static_cast<std::uint32_t>(parse_size(key, io::trim(t))));
        }
      } else {
        throw FormatError("encoder spec: unknown key '" + key + "'");
      }
    }
  }
  spec.validate();
  return spec;
}

void check_embeddings(const ImageEmbeddingSet& e, const EncoderSpec& spec) {
  auto check = [&](const FeatureMap& m, std::size_t c, const char* what) {
    if (m.channels != c || m.height != spec.grid || m.width != spec.grid ||
        m.data.size() != c * spec.grid * spec.grid) {
      throw ShapeError(e.sample_id + ": " + what + " map is " + std::to_string(m.channels) + "x" +
                       std::to_string(m.height) + "x" + std::to_string(m.width) + ", spec wants " +
                       std::to_string(c) + "x" + std::to_string(spec.grid) + "x" +
                       std::to_string(spec.grid));
    }
    for (float v : m.data) {
      if (!std::isfinite(v)) throw ShapeError(e.sample_id + ": non-finite embedding entry");
    }
  };
  if (e.taps.size() != spec.tap_layers.size()) {
    throw ShapeError(e.sample_id + ": expected " + std::to_string(spec.tap_layers.size()) +
                     " tap maps, got " + std::to_string(e.taps.size()));
  }
  for (const auto& t : e.taps) check(t, spec.tap_channels, "tap");
  check(e.final, spec.final_channels, "final");
}

ImageEmbeddingSet standin_encode(const SegmentationSample& sample, const EncoderSpec& spec,
                                 std::uint64_t seed) {
  spec.validate();
  const auto& img = sample.image;
  const std::size_t g = spec.grid;
  const std::size_t ps = std::max<std::size_t>(1, std::min(img.height, img.width) / g);
  const std::size_t ph = img.height / ps, pw = img.width / ps;
  if (ph == 0 || pw == 0) throw ShapeError("stand-in encoder: image smaller than one patch");
  const std::size_t k = ps * ps;

  auto encode_map = [&](std::size_t channels, std::uint64_t stream) {
    Rng rng(Rng::mix(seed, stream));
    std::vector<double> w(channels * k), b(channels);
    const double sd = 1.0 / std::sqrt(static_cast<double>(k));
    for (auto& v : w) v = rng.normal() * sd;
    for (auto& v : b) v = rng.normal() * 0.1;

    FeatureMap out(channels, g, g);
    std::vector<double> patch(k), proj(channels * ph * pw);
    for (std::size_t py = 0; py < ph; ++py)
      for (std::size_t px = 0; px < pw; ++px) {
        for (std::size_t dy = 0; dy < ps; ++dy)
          for (std::size_t dx = 0; dx < ps; ++dx)
            patch[dy * ps + dx] = static_cast<double>(img.at(py * ps + dy, px * ps + dx)) - 0.5;
        for (std::size_t c = 0; c < channels; ++c) {
          double s = b[c];
          for (std::size_t i = 0; i < k; ++i) s += w[c * k + i] * patch[i];
          proj[(c * ph + py) * pw + px] = s;
        }
      }
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < g; ++y) {
        const auto [y0, y1] = pool_bin(y, ph, g);
        for (std::size_t x = 0; x < g; ++x) {
          const auto [x0, x1] = pool_bin(x, pw, g);
          double s = 0.0;
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx) s += proj[(c * ph + yy) * pw + xx];
          out.at(c, y, x) = static_cast<float>(s / static_cast<double>((y1 - y0) * (x1 - x0)));
        }
      }
    return out;
  };

  ImageEmbeddingSet e;
  e.sample_id = sample.sample_id;
  for (auto layer : spec.tap_layers) e.taps.push_back(encode_map(spec.tap_channels, layer));
  e.final = encode_map(spec.final_channels, 0xF1A1ull);
  return e;
}

StandinEncoder::StandinEncoder(EncoderSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), seed_(seed) {
  spec_.validate();
}

ImageEmbeddingSet StandinEncoder::encode(const SegmentationSample& sample) const {
  return standin_encode(sample, spec_, seed_);
}

std::filesystem::path index_path_for(const std::filesystem::path& cache_path) {
  auto p = cache_path;
  p += ".idx";
  return p;
}

namespace {

class CacheWriter {
 public:
  CacheWriter(const EncoderSpec& spec, const std::filesystem::path& path)
      : out_(path, std::ios::binary | std::ios::trunc) {
    index_.cache_path = path;
    index_.spec = spec;
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    io::ByteWriter header;
    header.raw(std::string_view(kCacheMagic, 4));
    header.u32(kCacheVersion);
    write_spec(header, spec);
    put(header.bytes());
  }

  void append(const ImageEmbeddingSet& e) {
    check_embeddings(e, index_.spec);
    if (index_.entries.contains(e.sample_id)) {
      throw ValidationError("duplicate sample id in cache: " + e.sample_id);
    }
    const auto rec = encode_record(e);
    index_.entries[e.sample_id] = {offset_, rec.size()};
    put(rec);
  }

  CacheIndex finish() {
    out_.close();
    if (!out_) throw IoError("failed to finalize " + index_.cache_path.string());
    std::ostringstream idx;
    // Offset order, so the index is a faithful map of the file.
    std::vector<std::pair<std::string, CacheEntry>> rows(index_.entries.begin(),
                                                         index_.entries.end());
    std::sort(rows.begin(), rows.end(),
              [](const auto& a, const auto& b) { return a.second.offset < b.second.offset; });
    for (const auto& [id, ent] : rows) idx << id << ',' << ent.offset << ',' << ent.length << '\n';
    io::write_text(index_path_for(index_.cache_path), idx.str());
    return std::move(index_);
  }

 private:
  void put(const io::Bytes& b) {
    out_.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (!out_) throw IoError("write failure on " + index_.cache_path.string());
    offset_ += b.size();
  }

  std::ofstream out_;
  CacheIndex index_;
  std::uint64_t offset_ = 0;
};

}  // namespace

CacheIndex precompute_embeddings(const ImageEncoder& encoder,
                                 std::span<const SegmentationSample> samples,
                                 const std::filesystem::path& cache_path) {
  CacheWriter w(encoder.spec(), cache_path);
  for (const auto& s : samples) w.append(encoder.encode(s));
  return w.finish();
}

CacheIndex precompute_embeddings(const ImageEncoder& encoder,
                                 const std::vector<SampleRecord>& records, std::size_t image_size,
                                 const std::filesystem::path& cache_path) {
  CacheWriter w(encoder.spec(), cache_path);
  for (const auto& r : records) w.append(encoder.encode(load_sample(r, image_size)));
  return w.finish();
}

CacheIndex open_cache(const std::filesystem::path& cache_path) {
  CacheIndex index;
  index.cache_path = cache_path;
  {
    std::ifstream in(cache_path, std::ios::binary);
    if (!in) throw IoError("cannot open cache " + cache_path.string());
    std::vector<std::uint8_t> head(64 * 1024);
    in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    io::ByteReader r(head);
    auto magic = r.raw(4);
    if (!std::equal(magic.begin(), magic.end(), kCacheMagic)) {
      throw FormatError(cache_path.string() + ": not an embedding cache");
    }
    if (auto v = r.u32(); v != kCacheVersion) {
      throw FormatError(cache_path.string() + ": unsupported cache version " + std::to_string(v));
    }
    index.spec = read_spec(r);
  }
  const auto idx_path = index_path_for(cache_path);
  std::istringstream lines(io::read_text(idx_path));
  std::string line;
  while (std::getline(lines, line)) {
    if (io::trim(line).empty()) continue;
    auto f = io::split(io::trim(line), ',');
    if (f.size() != 3) throw FormatError(idx_path.string() + ": malformed line '" + line + "'");
    CacheEntry e{std::stoull(f[1]), std::stoull(f[2])};
    if (!index.entries.emplace(f[0], e).second) {
      throw FormatError(idx_path.string() + ": duplicate id " + f[0]);
    }
  }
  return index;
}

ImageEmbeddingSet load_embeddings(const CacheIndex& index, const std::string& sample_id) {
  auto it = index.entries.find(sample_id);
  if (it == index.entries.end()) throw NotFoundError("no cached embeddings for '" + sample_id + "'");
  const auto [offset, length] = it->second;

  std::ifstream in(index.cache_path, std::ios::binary);
  if (!in) throw IoError("cannot open cache " + index.cache_path.string());
  in.seekg(static_cast<std::streamoff>(offset));
  io::Bytes rec(length);
  in.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(length));
  if (static_cast<std::uint64_t>(in.gcount()) != length) {
    throw CorruptionError("cache record for '" + sample_id + "' is truncated");
  }
  if (length < 4) throw CorruptionError("cache record for '" + sample_id + "' is too short");

  io::ByteReader tail(std::span<const std::uint8_t>(rec).subspan(length - 4));
  const auto stored = tail.u32();
  if (io::crc32(std::span<const std::uint8_t>(rec).first(length - 4)) != stored) {
    throw CorruptionError("checksum mismatch in cache record for '" + sample_id + "'");
  }

  io::ByteReader r(std::span<const std::uint8_t>(rec).first(length - 4));
  ImageEmbeddingSet e;
  e.sample_id = r.str();
  if (e.sample_id != sample_id) {
    throw CorruptionError("cache record at offset " + std::to_string(offset) + " belongs to '" +
                          e.sample_id + "', expected '" + sample_id + "'");
  }
  const auto& spec = index.spec;
  const auto n = r.u32();
  if (n != spec.tap_layers.size() + 1) throw CorruptionError("unexpected payload count");
  std::vector<std::uint64_t> lens(n);
  for (auto& l : lens) l = r.u64();
  for (std::size_t t = 0; t + 1 < n; ++t) {
    e.taps.push_back(read_map(r, lens[t], spec.tap_channels, spec.grid));
  }
  e.final = read_map(r, lens.back(), spec.final_channels, spec.grid);
  if (r.remaining() != 0) throw CorruptionError("trailing bytes in cache record");
  return e;
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace desam
