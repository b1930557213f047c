// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Frozen multi-scale image embeddings: the encoder interface, a deterministic
// stand-in encoder, and the on-disk embedding cache.
//
// Cache file layout (all integers little-endian):
//   "DSEC" u32 version=1
//   spec: str name, u32 n_taps, u32 tap_layer[n_taps], u32 tap_channels,
//         u32 final_channels, u32 grid
//   records: u32 id_len, id bytes, u32 n_payloads, u64 payload_bytes[n],
//            float32 payloads (taps in order, then final), u32 crc32 of the
//            record bytes before the checksum
// The index lives next to it at "<cache>.idx": `sample_id,offset,length` lines.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "desam/dataset_io.hpp"

namespace desam {

struct EncoderSpec {
  std::string name = "standin";
  std::vector<std::uint32_t> tap_layers{8, 16, 24};
  std::size_t tap_channels = 1024;
  std::size_t final_channels = 256;
  std::size_t grid = 64;

  /// Throws ValidationError unless tap_layers is strictly increasing and every
  /// size is positive.
  void validate() const;

  /// `name:grid=G,taps=8/16/24,tap_channels=C,final_channels=F`
  std::string to_string() const;
  /// Inverse of to_string(). Omitted keys keep their defaults.
  static EncoderSpec parse(const std::string& text);

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

/// C x H x W float32 array.
struct FeatureMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  FeatureMap() = default;
  FeatureMap(std::size_t c, std::size_t h, std::size_t w)
      : channels(c), height(h), width(w), data(c * h * w, 0.0f) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

struct ImageEmbeddingSet {
  std::string sample_id;
  std::vector<FeatureMap> taps;
  FeatureMap final;

  friend bool operator==(const ImageEmbeddingSet&, const ImageEmbeddingSet&) = default;
};

/// Throws ShapeError unless `e` has the shapes `spec` declares and finite entries.
void check_embeddings(const ImageEmbeddingSet& e, const EncoderSpec& spec);

/// Image encoders are frozen: encode() must be a pure function of the sample.
/// Adapters for real pretrained encoders implement this interface.
class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual const EncoderSpec& spec() const = 0;
  virtual ImageEmbeddingSet encode(const SegmentationSample& sample) const = 0;
};

/// Seeded random projection of non-overlapping patches, adaptively
/// average-pooled to the grid. Each tap and the final map use their own
/// projection.
ImageEmbeddingSet standin_encode(const SegmentationSample& sample, const EncoderSpec& spec,
                                 std::uint64_t seed);

class StandinEncoder final : public ImageEncoder {
 public:
  StandinEncoder(EncoderSpec spec, std::uint64_t seed);
  const EncoderSpec& spec() const override { return spec_; }
  ImageEmbeddingSet encode(const SegmentationSample& sample) const override;

 private:
  EncoderSpec spec_;
  std::uint64_t seed_;
};

struct CacheEntry {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct CacheIndex {
  std::filesystem::path cache_path;
  EncoderSpec spec;
  std::map<std::string, CacheEntry> entries;

  bool contains(const std::string& id) const { return entries.contains(id); }
};

std::filesystem::path index_path_for(const std::filesystem::path& cache_path);

CacheIndex precompute_embeddings(const ImageEncoder& encoder,
                                 std::span<const SegmentationSample> samples,
                                 const std::filesystem::path& cache_path);
/// Streams samples from disk one at a time.
CacheIndex precompute_embeddings(const ImageEncoder& encoder,
                                 const std::vector<SampleRecord>& records, std::size_t image_size,
                                 const std::filesystem::path& cache_path);

/// Reads the cache header and its index file.
CacheIndex open_cache(const std::filesystem::path& cache_path);

/// Throws NotFoundError for unknown ids and CorruptionError when the record
/// is truncated or fails its checksum.
ImageEmbeddingSet load_embeddings(const CacheIndex& index, const std::string& sample_id);

/// 64-bit FNV-1a digest of a file's bytes.
std::uint64_t hash_file(const std::filesystem::path& path);

}  // namespace desam
