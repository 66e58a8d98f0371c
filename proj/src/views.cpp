#include "satloc/views.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "satloc/errors.hpp"

namespace satloc {

std::size_t intersection_area(const CropRect& a, const CropRect& b) {
  const std::size_t top = std::max(a.top, b.top);
  const std::size_t left = std::max(a.left, b.left);
  const std::size_t bottom = std::min(a.top + a.height, b.top + b.height);
  const std::size_t right = std::min(a.left + a.width, b.left + b.width);
  if (bottom <= top || right <= left) return 0;
  return (bottom - top) * (right - left);
}

CropRect ViewSpec::footprint(std::size_t idx) const {
  const std::size_t rows = grid_rows(), cols = grid_cols();
  if (idx >= rows * cols)
    throw IndexError("ViewSpec::footprint: patch " + std::to_string(idx) + " of " +
                     std::to_string(rows * cols));
  const std::size_t r = idx / cols;
  std::size_t c = idx % cols;
  if (flip) c = cols - 1 - c;
  const std::size_t kh = crop.height / rows, kw = crop.width / cols;
  return {crop.top + r * kh, crop.left + c * kw, kh, kw};
}

void ViewSpec::validate(std::size_t src_h, std::size_t src_w) const {
  if (patch == 0 || out_h == 0 || out_w == 0 || out_h % patch || out_w % patch)
    throw ContractError("ViewSpec: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                        " not divisible by patch " + std::to_string(patch));
  if (crop.height == 0 || crop.width == 0 || crop.top + crop.height > src_h ||
      crop.left + crop.width > src_w)
    throw ContractError("ViewSpec: crop outside " + std::to_string(src_h) + "x" +
                        std::to_string(src_w) + " source");
  if (crop.height % grid_rows() || crop.width % grid_cols())
    throw ContractError("ViewSpec: crop sides must be multiples of the patch grid");
}

namespace {

std::size_t round_to_multiple(double v, std::size_t m) {
  const auto k = static_cast<std::size_t>(std::llround(v / static_cast<double>(m)));
  return std::max<std::size_t>(k, 1) * m;
}

CropRect full_crop(std::size_t h, std::size_t w, std::size_t rows, std::size_t cols) {
  const std::size_t ch = h / rows * rows, cw = w / cols * cols;
  return {(h - ch) / 2, (w - cw) / 2, ch, cw};
}

// Area fraction and log-uniform aspect ratio; ten attempts, then the full
// (grid-floored) image.
CropRect sample_crop(std::size_t h, std::size_t w, std::size_t rows, std::size_t cols,
                     const ScaleRange& scale, const ScaleRange& aspect, Rng& rng) {
  const double area = static_cast<double>(h * w);
  const double log_lo = std::log(aspect.min), log_hi = std::log(aspect.max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double s = scale.min + (scale.max - scale.min) * uniform01(rng);
    const double r = std::exp(log_lo + (log_hi - log_lo) * uniform01(rng));
    const std::size_t cw = round_to_multiple(std::sqrt(s * area * r), cols);
    const std::size_t ch = round_to_multiple(std::sqrt(s * area / r), rows);
    if (cw > w || ch > h) continue;
    const std::size_t top = uniform_index(rng, h - ch + 1);
    const std::size_t left = uniform_index(rng, w - cw + 1);
    return {top, left, ch, cw};
  }
  return full_crop(h, w, rows, cols);
}

void check_source(const RasterImage& image, std::size_t out, std::size_t patch) {
  if (patch == 0 || out % patch)
    throw ContractError("view output " + std::to_string(out) + " not divisible by patch " +
                        std::to_string(patch));
  const std::size_t grid = out / patch;
  if (image.height < grid || image.width < grid || image.height < patch || image.width < patch)
    throw SamplingError("source " + std::to_string(image.height) + "x" +
                        std::to_string(image.width) + " smaller than minimum crop");
}

}  // namespace

ViewSpec full_view(std::size_t src_h, std::size_t src_w, std::size_t out_size, std::size_t patch) {
  const std::size_t grid = out_size / patch;
  return {full_crop(src_h, src_w, grid, grid), false, out_size, out_size, patch};
}

ViewSpec sample_reference_view(const RasterImage& image, const ViewSamplingConfig& cfg, Rng& rng) {
  check_source(image, cfg.ref_size, cfg.patch);
  const std::size_t grid = cfg.ref_size / cfg.patch;
  ViewSpec spec;
  spec.crop = sample_crop(image.height, image.width, grid, grid, cfg.ref_scale, cfg.aspect, rng);
  spec.flip = uniform01(rng) < cfg.flip_probability;
  spec.out_h = spec.out_w = cfg.ref_size;
  spec.patch = cfg.patch;
  return spec;
}

std::vector<ViewSpec> sample_query_views(const RasterImage& image, const ViewSpec& ref,
                                         const ViewSamplingConfig& cfg, std::size_t count,
                                         Rng& rng) {
  if (count == 0) throw ContractError("sample_query_views: count must be >= 1");
  check_source(image, cfg.query_size, cfg.patch);
  const std::size_t grid = cfg.query_size / cfg.patch;
  std::vector<ViewSpec> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    ViewSpec spec;
    spec.out_h = spec.out_w = cfg.query_size;
    spec.patch = cfg.patch;
    const std::size_t tries = std::max<std::size_t>(cfg.max_overlap_tries, 1);
    for (std::size_t t = 0; t < tries; ++t) {
      spec.crop = sample_crop(image.height, image.width, grid, grid, cfg.query_scale, cfg.aspect, rng);
      if (intersection_area(spec.crop, ref.crop) > 0) break;
    }
    spec.flip = uniform01(rng) < cfg.flip_probability;
    out.push_back(spec);
  }
  return out;
}

RasterImage materialize_view(const RasterImage& image, const ViewSpec& spec) {
  spec.validate(image.height, image.width);
  RasterImage out = RasterImage::zeros(image.channels, spec.out_h, spec.out_w, image.channel_tags);
  const CropRect& c = spec.crop;
  const double sy = static_cast<double>(c.height) / static_cast<double>(spec.out_h);
  const double sx = static_cast<double>(c.width) / static_cast<double>(spec.out_w);
  const double max_y = static_cast<double>(c.height - 1), max_x = static_cast<double>(c.width - 1);

  struct Tap {
    std::size_t i0, i1;
    double frac;
  };
  auto taps = [](std::size_t n, double scale, double max_v, bool mirror) {
    std::vector<Tap> t(n);
    for (std::size_t o = 0; o < n; ++o) {
      double s = std::clamp((static_cast<double>(o) + 0.5) * scale - 0.5, 0.0, max_v);
      if (mirror) s = max_v - s;
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      const std::size_t i1 = std::min(i0 + 1, static_cast<std::size_t>(max_v));
      t[o] = {i0, i1, s - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(spec.out_h, sy, max_y, false);
  const auto tx = taps(spec.out_w, sx, max_x, spec.flip);

  for (std::size_t ch = 0; ch < image.channels; ++ch)
    for (std::size_t y = 0; y < spec.out_h; ++y) {
      const Tap& a = ty[y];
      for (std::size_t x = 0; x < spec.out_w; ++x) {
        const Tap& b = tx[x];
        const double v00 = image.at(ch, c.top + a.i0, c.left + b.i0);
        const double v01 = image.at(ch, c.top + a.i0, c.left + b.i1);
        const double v10 = image.at(ch, c.top + a.i1, c.left + b.i0);
        const double v11 = image.at(ch, c.top + a.i1, c.left + b.i1);
        const double top = v00 + (v01 - v00) * b.frac;
        const double bot = v10 + (v11 - v10) * b.frac;
        out.at(ch, y, x) = static_cast<float>(top + (bot - top) * a.frac);
      }
    }
  return out;
}

RasterImage flip_horizontal(const RasterImage& image) {
  RasterImage out = image;
  for (std::size_t ch = 0; ch < image.channels; ++ch)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x)
        out.at(ch, y, x) = image.at(ch, y, image.width - 1 - x);
  return out;
}

Correspondence compute_correspondence(const ViewSpec& query, const ViewSpec& ref) {
  Correspondence corr;
  const std::size_t nq = query.num_patches(), nr = ref.num_patches();
  corr.h.assign(nq, Correspondence::kNone);
  std::vector<CropRect> ref_fp(nr);
  for (std::size_t j = 0; j < nr; ++j) ref_fp[j] = ref.footprint(j);
  for (std::size_t i = 0; i < nq; ++i) {
    const CropRect q = query.footprint(i);
    if (intersection_area(q, ref.crop) == 0) continue;
    std::size_t best_area = 0;
    for (std::size_t j = 0; j < nr; ++j) {
      const std::size_t a = intersection_area(q, ref_fp[j]);
      if (a > best_area) {
        best_area = a;
        corr.h[i] = static_cast<std::int64_t>(j);
      }
    }
    if (best_area > 0) corr.omega.push_back(i);
  }
  return corr;
}

PatchArray patchify(const RasterImage& view, std::size_t patch) {
  if (patch == 0 || view.height % patch || view.width % patch)
    throw ContractError("patchify: " + std::to_string(view.height) + "x" +
                        std::to_string(view.width) + " not divisible by " + std::to_string(patch));
  PatchArray pa;
  pa.channels = view.channels;
  pa.patch = patch;
  pa.grid_cols = view.width / patch;
  pa.count = (view.height / patch) * pa.grid_cols;
  pa.data.resize(pa.count * pa.patch_numel());
  float* dst = pa.data.data();
  for (std::size_t i = 0; i < pa.count; ++i) {
    const std::size_t y0 = (i / pa.grid_cols) * patch, x0 = (i % pa.grid_cols) * patch;
    for (std::size_t c = 0; c < view.channels; ++c)
      for (std::size_t y = 0; y < patch; ++y) {
        const float* src = &view.data[(c * view.height + y0 + y) * view.width + x0];
        dst = std::copy(src, src + patch, dst);
      }
  }
  return pa;
}

RasterImage unpatchify(const PatchArray& pa, std::size_t height, std::size_t width,
                       std::vector<std::string> tags) {
  if (pa.patch == 0 || height % pa.patch || width % pa.patch ||
      (height / pa.patch) * (width / pa.patch) != pa.count || width / pa.patch != pa.grid_cols)
    throw ContractError("unpatchify: patch grid does not match " + std::to_string(height) + "x" +
                        std::to_string(width));
  RasterImage img = RasterImage::zeros(pa.channels, height, width, std::move(tags));
  const float* src = pa.data.data();
  for (std::size_t i = 0; i < pa.count; ++i) {
    const std::size_t y0 = (i / pa.grid_cols) * pa.patch, x0 = (i % pa.grid_cols) * pa.patch;
    for (std::size_t c = 0; c < pa.channels; ++c)
      for (std::size_t y = 0; y < pa.patch; ++y, src += pa.patch)
        std::copy(src, src + pa.patch, &img.data[(c * height + y0 + y) * width + x0]);
  }
  return img;
}

}  // namespace satloc
