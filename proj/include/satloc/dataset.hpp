#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "satloc/raster.hpp"

namespace satloc {

/// Header of an "MMRAST1\0" dataset file.
///
/// Layout (little-endian): magic[8], u32 version, u64 count, u32 C, u32 H,
/// u32 W, then per channel {u8 tag length, tag bytes, f32 mean, f32 std},
/// u32 num_classes, the C*H*W f32 payload of every sample, and when
/// num_classes > 0 an H*W i8 label map per sample (-1 = ignore).
struct DatasetHeader {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t version = kVersion;
  std::uint64_t count = 0;
  std::uint32_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<std::string> tags;
  std::vector<float> mean;
  std::vector<float> stddev;
  std::uint32_t num_classes = 0;

  std::size_t sample_numel() const { return std::size_t{channels} * height * width; }
};

struct DatasetFile {
  DatasetHeader header;
  std::vector<float> payload;
  std::vector<std::int8_t> labels;  // empty unless num_classes > 0

  // Fills mean/stddev from the payload; constant channels get std 1.
  void compute_statistics();
};

std::string encode_dataset(const DatasetFile& file);
DatasetFile decode_dataset(std::string_view bytes, const std::string& origin = "<memory>");
void write_dataset(const std::filesystem::path& path, const DatasetFile& file);
// Throws FormatError on bad magic/version, truncation or invalid statistics.
DatasetFile read_dataset(const std::filesystem::path& path);

enum class LabelTask {
  kFlood,          // thresholded water field
  kPositional,     // water field thresholded differently east and west of a hidden meridian
};

struct SyntheticSpec {
  std::size_t count = 64;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<std::string> tags;  // empty = every band code in canonical order
  bool easy = false;              // add strong coordinate ramps
  bool labeled = false;
  LabelTask task = LabelTask::kFlood;
};

DatasetFile generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

/// Standardised in-memory dataset.
class Dataset {
 public:
  static Dataset load(const std::filesystem::path& path);
  static Dataset from_file(DatasetFile file);

  std::size_t size() const { return header_.count; }
  const DatasetHeader& header() const { return header_; }
  bool labeled() const { return header_.num_classes > 0; }

  RasterImage sample(std::size_t i) const;
  std::span<const std::int8_t> labels(std::size_t i) const;
  std::span<const float> raw(std::size_t i) const;

  // Throws ConfigError when the dataset cannot feed training.
  void require_trainable(std::size_t batch_size) const;

  // Deterministic permutation of sample indices for (seed, epoch).
  std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch) const;

 private:
  DatasetHeader header_;
  std::vector<float> data_;  // standardised
  std::vector<std::int8_t> labels_;
};

}  // namespace satloc
