#include "satloc/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "satloc/errors.hpp"
#include "satloc/rng.hpp"

namespace satloc {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'M', 'R', 'A', 'S', 'T', '1', '\0'};

class Writer {
 public:
  template <class V>
  void put(V v) {
    out_.append(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view in, std::string origin) : in_(in), origin_(std::move(origin)) {}
  template <class V>
  V get(const char* what) {
    V v;
    bytes(&v, sizeof(V), what);
    return v;
  }
  void bytes(void* dst, std::size_t n, const char* what) {
    if (in_.size() - pos_ < n)
      throw FormatError(origin_ + ": truncated while reading " + what + " at byte " + std::to_string(pos_));
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::string_view in_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void DatasetFile::compute_statistics() {
  const std::size_t c = header.channels, plane = std::size_t{header.height} * header.width;
  header.mean.assign(c, 0.0f);
  header.stddev.assign(c, 1.0f);
  if (header.count == 0 || plane == 0) return;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0, ss = 0;
    for (std::size_t i = 0; i < header.count; ++i) {
      const float* p = &payload[(i * c + ch) * plane];
      for (std::size_t k = 0; k < plane; ++k) {
        s += p[k];
        ss += static_cast<double>(p[k]) * p[k];
      }
    }
    const double n = static_cast<double>(header.count * plane);
    const double mean = s / n, var = std::max(0.0, ss / n - mean * mean);
    header.mean[ch] = static_cast<float>(mean);
    header.stddev[ch] = var > 1e-12 ? static_cast<float>(std::sqrt(var)) : 1.0f;
  }
}

std::string encode_dataset(const DatasetFile& file) {
  const auto& h = file.header;
  if (h.tags.size() != h.channels || h.mean.size() != h.channels || h.stddev.size() != h.channels)
    throw ContractError("encode_dataset: per-channel metadata does not match the channel count");
  if (file.payload.size() != h.count * h.sample_numel())
    throw ContractError("encode_dataset: payload size does not match the header");
  const std::size_t label_numel = h.num_classes ? h.count * h.height * h.width : 0;
  if (file.labels.size() != label_numel) throw ContractError("encode_dataset: label size does not match the header");
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(h.version);
  w.put<std::uint64_t>(h.count);
  w.put<std::uint32_t>(h.channels);
  w.put<std::uint32_t>(h.height);
  w.put<std::uint32_t>(h.width);
  for (std::size_t c = 0; c < h.channels; ++c) {
    if (h.tags[c].size() > 255) throw ContractError("encode_dataset: channel tag longer than 255 bytes");
    w.put<std::uint8_t>(static_cast<std::uint8_t>(h.tags[c].size()));
    w.bytes(h.tags[c].data(), h.tags[c].size());
    w.put<float>(h.mean[c]);
    w.put<float>(h.stddev[c]);
  }
  w.put<std::uint32_t>(h.num_classes);
  w.bytes(file.payload.data(), file.payload.size() * sizeof(float));
  w.bytes(file.labels.data(), file.labels.size());
  return w.take();
}

DatasetFile decode_dataset(std::string_view bytes, const std::string& origin) {
  Reader r(bytes, origin);
  char magic[8];
  r.bytes(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError(origin + ": not an MMRAST1 dataset (bad magic)");
  DatasetFile f;
  auto& h = f.header;
  h.version = r.get<std::uint32_t>("version");
  if (h.version != DatasetHeader::kVersion)
    throw FormatError(origin + ": unsupported dataset version " + std::to_string(h.version));
  h.count = r.get<std::uint64_t>("count");
  h.channels = r.get<std::uint32_t>("channels");
  h.height = r.get<std::uint32_t>("height");
  h.width = r.get<std::uint32_t>("width");
  for (std::uint32_t c = 0; c < h.channels; ++c) {
    const auto len = r.get<std::uint8_t>("tag length");
    std::string tag(len, '\0');
    r.bytes(tag.data(), len, "tag");
    h.tags.push_back(std::move(tag));
    h.mean.push_back(r.get<float>("channel mean"));
    const float sd = r.get<float>("channel std");
    if (!(sd > 0.0f) || !std::isfinite(sd))
      throw FormatError(origin + ": channel " + h.tags.back() + " has non-positive std");
    h.stddev.push_back(sd);
  }
  h.num_classes = r.get<std::uint32_t>("num_classes");
  const std::size_t numel = h.count * h.sample_numel();
  if (r.remaining() / sizeof(float) < numel)
    throw FormatError(origin + ": payload truncated (" + std::to_string(r.remaining()) + " bytes for " +
                      std::to_string(numel) + " floats)");
  f.payload.resize(numel);
  r.bytes(f.payload.data(), numel * sizeof(float), "payload");
  if (h.num_classes) {
    f.labels.resize(h.count * h.height * h.width);
    r.bytes(f.labels.data(), f.labels.size(), "labels");
  }
  if (r.remaining() != 0) throw FormatError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return f;
}

void write_dataset(const std::filesystem::path& path, const DatasetFile& file) {
  const std::string bytes = encode_dataset(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

DatasetFile read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_dataset(ss.str(), path.string());
}

namespace {

// Smooth random field: a few low-frequency plane waves, unit-ish variance.
struct WaveField {
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;

  WaveField(Rng& rng, std::size_t n, double max_cycles) {
    double norm = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const double f = 0.4 + (max_cycles - 0.4) * uniform01(rng);
      const double theta = 2 * std::numbers::pi * uniform01(rng);
      const double amp = 1.0 / (0.5 + f);
      waves.push_back({f * std::cos(theta), f * std::sin(theta), 2 * std::numbers::pi * uniform01(rng), amp});
      norm += amp * amp / 2;
    }
    for (auto& w : waves) w.amp /= std::sqrt(norm);
  }
  double operator()(double u, double v) const {
    double s = 0;
    for (const auto& w : waves) s += w.amp * std::cos(2 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
    return s;
  }
};

struct Shape {
  bool disk;
  double cu, cv, ru, rv, value;
  bool contains(double u, double v) const {
    const double du = (u - cu) / ru, dv = (v - cv) / rv;
    return disk ? du * du + dv * dv <= 1.0 : std::abs(du) <= 1.0 && std::abs(dv) <= 1.0;
  }
};

struct BandResponse {
  double vegetation, urban, water, base;
};

// Spectral response by band code: vegetation is bright in NIR and red edge,
// water is dark in NIR/SWIR and low in radar backscatter.
BandResponse response(const BandInfo& b) {
  const std::string_view c = b.code;
  if (b.modality == Modality::kSentinel2) {
    if (c == "B1") return {0.02, 0.10, 0.05, 0.12};
    if (c == "B2") return {0.03, 0.12, 0.06, 0.10};
    if (c == "B3") return {0.08, 0.12, 0.04, 0.10};
    if (c == "B4") return {-0.04, 0.14, -0.02, 0.09};
    if (c == "B5") return {0.10, 0.14, -0.06, 0.14};
    if (c == "B6") return {0.22, 0.14, -0.10, 0.18};
    if (c == "B7") return {0.28, 0.14, -0.14, 0.20};
    if (c == "B8") return {0.32, 0.15, -0.20, 0.22};
    if (c == "B8A") return {0.30, 0.15, -0.20, 0.22};
    if (c == "B9") return {0.10, 0.05, -0.08, 0.08};
    if (c == "B10") return {0.00, 0.01, 0.00, 0.02};
    if (c == "B11") return {0.06, 0.20, -0.18, 0.18};
    return {0.02, 0.18, -0.15, 0.12};
  }
  if (b.modality == Modality::kSentinel1) {
    const bool cross = c.ends_with("VH") || c.ends_with("HV");
    return {cross ? 2.5 : 1.5, cross ? 2.0 : 4.0, cross ? -6.0 : -8.0, cross ? -17.0 : -10.0};
  }
  return {0.0, 0.0, 0.0, 0.0};
}

}  // namespace

DatasetFile generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  std::vector<std::string> tags = spec.tags;
  if (tags.empty())
    for (const auto& b : band_table()) tags.emplace_back(b.code);
  std::vector<const BandInfo*> bands;
  for (const auto& t : tags) {
    const BandInfo* b = find_band(t);
    if (!b) throw ConfigError("synthetic dataset: unknown band code " + t);
    bands.push_back(b);
  }
  if (spec.height == 0 || spec.width == 0) throw ConfigError("synthetic dataset: empty raster size");

  DatasetFile f;
  auto& h = f.header;
  h.count = spec.count;
  h.channels = static_cast<std::uint32_t>(tags.size());
  h.height = static_cast<std::uint32_t>(spec.height);
  h.width = static_cast<std::uint32_t>(spec.width);
  h.tags = tags;
  h.num_classes = spec.labeled ? 2 : 0;
  const std::size_t H = spec.height, W = spec.width, plane = H * W, C = tags.size();
  f.payload.assign(spec.count * C * plane, 0.0f);
  if (spec.labeled) f.labels.assign(spec.count * plane, 0);

  std::vector<double> veg(plane), urban(plane), water(plane), moist(plane), elev(plane), slope(plane);
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rng rng = derive_rng(seed, {0x5a17, i});
    const WaveField f_veg(rng, 5, 3.0), f_moist(rng, 4, 2.0), f_elev(rng, 3, 1.5), f_tex(rng, 8, 6.0);
    std::vector<Shape> shapes(3 + uniform_index(rng, 4));
    for (auto& s : shapes)
      s = {uniform01(rng) < 0.5, uniform01(rng), uniform01(rng), 0.04 + 0.12 * uniform01(rng),
           0.04 + 0.12 * uniform01(rng), 0.6 + 0.4 * uniform01(rng)};
    const double wet_level = 0.4 + 0.5 * uniform01(rng);
    const double meridian = 0.35 + 0.3 * uniform01(rng);
    std::normal_distribution<double> noise(0.0, 1.0);

    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
        const std::size_t k = y * W + x;
        double urb = 0;
        for (const auto& s : shapes)
          if (s.contains(u, v)) urb = std::max(urb, s.value);
        elev[k] = f_elev(u, v);
        moist[k] = f_moist(u, v) - 0.6 * elev[k];
        water[k] = 1.0 / (1.0 + std::exp(-6.0 * (moist[k] - wet_level)));
        veg[k] = (0.5 + 0.5 * std::tanh(f_veg(u, v) + 0.3 * f_tex(u, v))) * (1.0 - water[k]) * (1.0 - urb);
        urban[k] = urb * (1.0 - water[k]);
        slope[k] = f_elev(u + 0.01, v) - f_elev(u - 0.01, v);
        if (spec.labeled) {
          const bool wet = spec.task == LabelTask::kFlood ? moist[k] > wet_level
                                                          : moist[k] > wet_level + (u < meridian ? 0.0 : 0.5);
          f.labels[i * plane + k] = wet ? 1 : 0;
        }
      }

    for (std::size_t c = 0; c < C; ++c) {
      const BandInfo& b = *bands[c];
      const BandResponse r = response(b);
      float* out = &f.payload[(i * C + c) * plane];
      const bool descending = b.code.starts_with("D-");
      const bool horizontal = b.code.ends_with("HH") || b.code.ends_with("HV");
      for (std::size_t k = 0; k < plane; ++k) {
        double val;
        if (b.modality == Modality::kElevation) {
          val = 120.0 * elev[k] + 300.0 + 0.5 * noise(rng);
        } else if (b.modality == Modality::kSentinel1) {
          const double terrain = (descending ? -1.0 : 1.0) * 4.0 * slope[k];
          val = r.base + r.vegetation * veg[k] + r.urban * urban[k] + r.water * water[k] + terrain +
                (horizontal ? 1.5 * urban[k] : 0.0) + 0.8 * noise(rng);
        } else {
          val = r.base + r.vegetation * veg[k] + r.urban * urban[k] + r.water * water[k] +
                0.01 * noise(rng);
        }
        out[k] = static_cast<float>(val);
      }
    }
  }
  f.compute_statistics();

  if (spec.easy) {
    // Coordinate ramps several standard deviations strong: alternate bands
    // carry the column ramp, the row ramp, or both.
    for (std::size_t i = 0; i < spec.count; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const double a = c % 3 == 0 ? 1.0 : (c % 3 == 1 ? 0.0 : 0.7);
        const double b = c % 3 == 1 ? 1.0 : (c % 3 == 0 ? 0.0 : -0.7);
        const double amp = 4.0 * h.stddev[c];
        float* out = &f.payload[(i * C + c) * plane];
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W) - 0.5;
            const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H) - 0.5;
            out[y * W + x] += static_cast<float>(amp * (a * u + b * v));
          }
      }
    f.compute_statistics();
  }
  return f;
}

Dataset Dataset::load(const std::filesystem::path& path) { return from_file(read_dataset(path)); }

Dataset Dataset::from_file(DatasetFile file) {
  Dataset d;
  d.header_ = std::move(file.header);
  d.data_ = std::move(file.payload);
  d.labels_ = std::move(file.labels);
  const std::size_t plane = std::size_t{d.header_.height} * d.header_.width;
  for (std::size_t i = 0; i < d.header_.count; ++i)
    for (std::size_t c = 0; c < d.header_.channels; ++c) {
      float* p = &d.data_[(i * d.header_.channels + c) * plane];
      const float m = d.header_.mean[c], s = d.header_.stddev[c];
      for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - m) / s;
    }
  return d;
}

RasterImage Dataset::sample(std::size_t i) const {
  if (i >= size()) throw IndexError("Dataset::sample: index " + std::to_string(i) + " of " + std::to_string(size()));
  RasterImage img;
  img.channels = header_.channels;
  img.height = header_.height;
  img.width = header_.width;
  img.channel_tags = header_.tags;
  const auto r = raw(i);
  img.data.assign(r.begin(), r.end());
  return img;
}

std::span<const float> Dataset::raw(std::size_t i) const {
  const std::size_t n = header_.sample_numel();
  return std::span<const float>(data_).subspan(i * n, n);
}

std::span<const std::int8_t> Dataset::labels(std::size_t i) const {
  if (!labeled()) throw ContractError("Dataset::labels: dataset carries no labels");
  const std::size_t n = std::size_t{header_.height} * header_.width;
  return std::span<const std::int8_t>(labels_).subspan(i * n, n);
}

void Dataset::require_trainable(std::size_t batch_size) const {
  if (size() == 0) throw ConfigError("dataset is empty");
  if (batch_size == 0 || batch_size > size())
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds dataset size " + std::to_string(size()));
}

std::vector<std::size_t> Dataset::epoch_order(std::uint64_t seed, std::uint64_t epoch) const {
  std::vector<std::size_t> order(size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = derive_rng(seed, {0xe90c, epoch});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

}  // namespace satloc
