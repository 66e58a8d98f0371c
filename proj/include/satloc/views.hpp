#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "satloc/raster.hpp"
#include "satloc/rng.hpp"

namespace satloc {

struct CropRect {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t area() const { return height * width; }
  bool contains(const CropRect& o) const {
    return o.top >= top && o.left >= left && o.top + o.height <= top + height &&
           o.left + o.width <= left + width;
  }
  friend bool operator==(const CropRect&, const CropRect&) = default;
};

std::size_t intersection_area(const CropRect& a, const CropRect& b);

/// Source crop, flip and output grid of one augmented view.
///
/// Crop sides are multiples of the patch-grid counts, so every patch covers an
/// integer rectangle of source pixels.
struct ViewSpec {
  CropRect crop;
  bool flip = false;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  std::size_t patch = 0;

  std::size_t grid_rows() const { return out_h / patch; }
  std::size_t grid_cols() const { return out_w / patch; }
  std::size_t num_patches() const { return grid_rows() * grid_cols(); }

  // Source-pixel rectangle seen by output patch `idx` (row-major).
  CropRect footprint(std::size_t idx) const;

  // Throws ContractError unless the crop lies inside a `src_h` x `src_w` image
  // and the grid divides both the output and the crop.
  void validate(std::size_t src_h, std::size_t src_w) const;
  friend bool operator==(const ViewSpec&, const ViewSpec&) = default;
};

struct ScaleRange {
  double min = 0.0;
  double max = 1.0;
};

struct ViewSamplingConfig {
  std::size_t ref_size = 64;
  std::size_t query_size = 32;
  std::size_t patch = 8;
  std::size_t num_queries = 10;
  ScaleRange ref_scale{0.3, 1.0};
  ScaleRange query_scale{0.05, 0.3};
  ScaleRange aspect{3.0 / 4.0, 4.0 / 3.0};
  double flip_probability = 0.5;
  std::size_t max_overlap_tries = 100;

  static ViewSamplingConfig desk() { return {}; }
  static ViewSamplingConfig full_scale() {
    ViewSamplingConfig c;
    c.ref_size = 224;
    c.query_size = 96;
    c.patch = 16;
    return c;
  }
};

ViewSpec sample_reference_view(const RasterImage& image, const ViewSamplingConfig& cfg, Rng& rng);
std::vector<ViewSpec> sample_query_views(const RasterImage& image, const ViewSpec& ref,
                                         const ViewSamplingConfig& cfg, std::size_t count,
                                         Rng& rng);

// Full-image, unflipped spec at the given output size; sides are floored to
// grid multiples.
ViewSpec full_view(std::size_t src_h, std::size_t src_w, std::size_t out_size, std::size_t patch);

// Crop, optional horizontal flip, bilinear resample (half-pixel centres).
RasterImage materialize_view(const RasterImage& image, const ViewSpec& spec);
RasterImage flip_horizontal(const RasterImage& image);

struct Correspondence {
  static constexpr std::int64_t kNone = -1;
  std::vector<std::int64_t> h;      // length N_q; kNone where no overlap
  std::vector<std::size_t> omega;   // ascending indices with h != kNone
};

Correspondence compute_correspondence(const ViewSpec& query, const ViewSpec& ref);

// Column-mirrored patch index on a grid with `cols` columns.
inline std::size_t flip_col(std::size_t idx, std::size_t cols) {
  return (idx / cols) * cols + (cols - 1 - idx % cols);
}

/// N x C x P x P patch stack in row-major patch order.
struct PatchArray {
  std::size_t count = 0;
  std::size_t channels = 0;
  std::size_t patch = 0;
  std::size_t grid_cols = 0;
  std::vector<float> data;

  std::size_t patch_numel() const { return channels * patch * patch; }
  const float* patch_data(std::size_t i) const { return data.data() + i * patch_numel(); }
};

PatchArray patchify(const RasterImage& view, std::size_t patch);
RasterImage unpatchify(const PatchArray& patches, std::size_t height, std::size_t width,
                       std::vector<std::string> tags = {});

}  // namespace satloc
