#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace satloc {

enum class Modality { kSentinel2, kSentinel1, kElevation };

struct BandInfo {
  std::string_view code;
  Modality modality;
  std::string_view name;
  int resolution_m;
};

// Band codes for Sentinel-2 MSI, Sentinel-1 SAR (ascending/descending orbit
// polarisations) and the elevation model, in canonical dataset order.
std::span<const BandInfo> band_table();
const BandInfo* find_band(std::string_view code);
std::string_view modality_name(Modality m);

/// C x H x W multimodal pixel grid, channel-major, one tag per channel.
struct RasterImage {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;
  std::vector<std::string> channel_tags;

  static RasterImage zeros(std::size_t c, std::size_t h, std::size_t w,
                           std::vector<std::string> tags = {});

  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  std::span<const float> plane(std::size_t c) const {
    return std::span<const float>(data).subspan(c * height * width, height * width);
  }

  // Throws ContractError when tags/data sizes disagree or a value is not finite.
  void validate() const;
};

}  // namespace satloc
