#include "satloc/raster.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "satloc/errors.hpp"

namespace satloc {

namespace {

constexpr std::array<BandInfo, 22> kBands{{
    {"B1", Modality::kSentinel2, "Ultra-blue", 60},
    {"B2", Modality::kSentinel2, "Blue", 10},
    {"B3", Modality::kSentinel2, "Green", 10},
    {"B4", Modality::kSentinel2, "Red", 10},
    {"B5", Modality::kSentinel2, "Red edge 1", 20},
    {"B6", Modality::kSentinel2, "Red edge 2", 20},
    {"B7", Modality::kSentinel2, "Red edge 3", 20},
    {"B8", Modality::kSentinel2, "Near-infrared", 10},
    {"B8A", Modality::kSentinel2, "Red edge 4", 20},
    {"B9", Modality::kSentinel2, "Water vapour", 60},
    {"B10", Modality::kSentinel2, "Cirrus", 60},
    {"B11", Modality::kSentinel2, "Shortwave-infrared 1", 20},
    {"B12", Modality::kSentinel2, "Shortwave-infrared 2", 20},
    {"A-VV", Modality::kSentinel1, "Ascending orbit VV", 10},
    {"A-VH", Modality::kSentinel1, "Ascending orbit VH", 10},
    {"A-HH", Modality::kSentinel1, "Ascending orbit HH", 10},
    {"A-HV", Modality::kSentinel1, "Ascending orbit HV", 10},
    {"D-VV", Modality::kSentinel1, "Descending orbit VV", 10},
    {"D-VH", Modality::kSentinel1, "Descending orbit VH", 10},
    {"D-HH", Modality::kSentinel1, "Descending orbit HH", 10},
    {"D-HV", Modality::kSentinel1, "Descending orbit HV", 10},
    {"DEM", Modality::kElevation, "Elevation", 30},
}};

}  // namespace

std::span<const BandInfo> band_table() { return kBands; }

const BandInfo* find_band(std::string_view code) {
  auto it = std::find_if(kBands.begin(), kBands.end(), [&](const BandInfo& b) { return b.code == code; });
  return it == kBands.end() ? nullptr : &*it;
}

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::kSentinel2: return "S2";
    case Modality::kSentinel1: return "S1";
    case Modality::kElevation: return "DEM";
  }
  return "?";
}

RasterImage RasterImage::zeros(std::size_t c, std::size_t h, std::size_t w,
                               std::vector<std::string> tags) {
  RasterImage img;
  img.channels = c;
  img.height = h;
  img.width = w;
  img.data.assign(c * h * w, 0.0f);
  if (tags.empty())
    for (std::size_t i = 0; i < c; ++i) tags.push_back("C" + std::to_string(i));
  img.channel_tags = std::move(tags);
  return img;
}

void RasterImage::validate() const {
  if (channel_tags.size() != channels)
    throw ContractError("RasterImage: " + std::to_string(channel_tags.size()) + " tags for " +
                        std::to_string(channels) + " channels");
  if (data.size() != channels * height * width)
    throw ContractError("RasterImage: element count does not match C*H*W");
  if (!std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); }))
    throw ContractError("RasterImage: non-finite element");
}

}  // namespace satloc
