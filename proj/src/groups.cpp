#include "satloc/groups.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "satloc/errors.hpp"

namespace satloc {

namespace {

using Codes = std::vector<std::vector<std::string>>;

const std::map<std::string, Codes, std::less<>>& presets() {
  static const std::map<std::string, Codes, std::less<>> table = [] {
    const Codes s2_similarity = {{"B2", "B3", "B4", "B8"}, {"B5", "B6", "B7", "B8A"}, {"B11", "B12"}};
    const std::vector<std::string> sar_v = {"A-VV", "A-VH", "D-VV", "D-VH"};
    const std::vector<std::string> sar_h = {"A-HH", "A-HV", "D-HH", "D-HV"};
    auto plus = [](Codes base, const Codes& extra) {
      base.insert(base.end(), extra.begin(), extra.end());
      return base;
    };
    std::map<std::string, Codes, std::less<>> t;
    t["S2-Similarity"] = s2_similarity;
    t["S2+S1-Separate"] = plus(s2_similarity, {sar_v, sar_h});
    t["RGBN+S1-Separate"] = {{"B2"}, {"B3"}, {"B4"}, {"B8"}, sar_v, sar_h};
    t["S2+S1-Mixed"] = plus(s2_similarity, {{"B1", "A-VV", "A-VH", "D-VV", "D-VH"},
                                            {"B1", "A-HH", "A-HV", "D-HH", "D-HV"}});
    t["S2+S1+DEM-Separate"] = plus(t["S2+S1-Separate"], {{"DEM"}});
    t["Best"] = {{"B1", "B2"},
                 {"B3", "B7"},
                 {"B4", "B8A"},
                 {"B11"},
                 {"DEM", "A-VV", "A-VH", "D-VH"},
                 {"A-HH", "A-HV", "D-VV", "D-HH"}};
    return t;
  }();
  return table;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

Codes parse_explicit(std::string_view spec) {
  Codes out;
  std::stringstream groups{std::string(spec)};
  std::string group;
  while (std::getline(groups, group, '|')) {
    std::vector<std::string> bands;
    std::stringstream gs(group);
    std::string band;
    while (std::getline(gs, band, ','))
      if (auto t = trim(band); !t.empty()) bands.push_back(t);
    if (bands.empty()) throw ConfigError("group list '" + std::string(spec) + "' has an empty group");
    out.push_back(std::move(bands));
  }
  return out;
}

}  // namespace

std::vector<std::string> group_preset_names() {
  std::vector<std::string> names{"All"};
  for (const auto& [k, v] : presets()) names.push_back(k);
  return names;
}

std::vector<std::vector<std::string>> group_preset_codes(std::string_view preset) {
  if (preset == "All") return {};
  auto it = presets().find(preset);
  if (it == presets().end()) throw ConfigError("unknown group preset '" + std::string(preset) + "'");
  return it->second;
}

GroupSetting group_setting_from_codes(std::string name, const Codes& codes,
                                      std::span<const std::string> channel_tags) {
  if (codes.empty()) throw ConfigError("group setting '" + name + "' has no groups");
  GroupSetting s;
  s.name = std::move(name);
  s.num_channels = channel_tags.size();
  s.band_codes = codes;
  for (const auto& group : codes) {
    if (group.empty()) throw ConfigError("group setting '" + s.name + "' has an empty group");
    std::vector<std::size_t> idx;
    for (const auto& code : group) {
      auto it = std::find(channel_tags.begin(), channel_tags.end(), code);
      if (it == channel_tags.end())
        throw ConfigError("group setting '" + s.name + "' needs band " + code +
                          " which the dataset does not provide");
      idx.push_back(static_cast<std::size_t>(it - channel_tags.begin()));
    }
    s.groups.push_back(std::move(idx));
  }
  return s;
}

GroupSetting build_group_setting(std::string_view preset, std::span<const std::string> channel_tags) {
  if (preset == "All") {
    if (channel_tags.empty()) throw ConfigError("group setting 'All' over zero channels");
    return group_setting_from_codes("All", {std::vector<std::string>(channel_tags.begin(), channel_tags.end())},
                                    channel_tags);
  }
  if (auto it = presets().find(preset); it != presets().end())
    return group_setting_from_codes(it->first, it->second, channel_tags);
  if (preset.find(',') == std::string_view::npos && preset.find('|') == std::string_view::npos &&
      find_band(preset) == nullptr)
    throw ConfigError("unknown group preset '" + std::string(preset) + "'");
  return group_setting_from_codes(std::string(preset), parse_explicit(preset), channel_tags);
}

template <std::floating_point T>
GroupEmbedder<T> GroupEmbedder<T>::make(ParamStore<T>& store, const std::string& name,
                                        const GroupSetting& setting, std::size_t patch,
                                        std::size_t width, Rng& rng) {
  GroupEmbedder e;
  e.setting_ = setting;
  e.patch_ = patch;
  e.width_ = width;
  for (std::size_t g = 0; g < setting.num_groups(); ++g) {
    const std::size_t in = setting.groups[g].size() * patch * patch;
    e.proj_.push_back(Linear<T>::make(store, name + ".group" + std::to_string(g), in, width, rng, true,
                                      1.0 / std::sqrt(static_cast<double>(in))));
  }
  return e;
}

template <std::floating_point T>
GroupedTokens<T> GroupEmbedder<T>::embed(std::span<const PatchArray> batch) const {
  if (batch.empty()) throw ContractError("GroupEmbedder::embed: empty batch");
  const std::size_t n = batch.front().count, pp = patch_ * patch_;
  for (const auto& pa : batch) {
    if (pa.channels != setting_.num_channels)
      throw ContractError("GroupEmbedder::embed: patches carry " + std::to_string(pa.channels) +
                          " channels, group setting expects " + std::to_string(setting_.num_channels));
    if (pa.patch != patch_ || pa.count != n)
      throw ContractError("GroupEmbedder::embed: inconsistent patch arrays in batch");
  }
  const std::size_t B = batch.size(), G = setting_.num_groups();
  std::vector<Tensor<T>> per_group;
  for (std::size_t g = 0; g < G; ++g) {
    const auto& chans = setting_.groups[g];
    const std::size_t in = chans.size() * pp;
    std::vector<T> x(B * n * in);
    T* dst = x.data();
    for (const auto& pa : batch)
      for (std::size_t i = 0; i < n; ++i) {
        const float* src = pa.patch_data(i);
        for (std::size_t c : chans) dst = std::copy(src + c * pp, src + (c + 1) * pp, dst);
      }
    per_group.push_back(proj_[g](Tensor<T>::from({B * n, in}, std::move(x))));
  }
  // Rows arrive as (g, b, i); reorder to (b, g, i).
  std::vector<std::size_t> order;
  order.reserve(B * G * n);
  GroupedTokens<T> out;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t i = 0; i < n; ++i) {
        order.push_back((g * B + b) * n + i);
        out.group_ids.push_back(static_cast<std::int32_t>(g));
        out.position_ids.push_back(static_cast<std::int32_t>(i));
      }
  Tensor<T> all = G == 1 ? per_group.front() : ops::concat_rows(per_group);
  out.tokens = ops::reshape(ops::gather_rows(all, order), {B, G * n, width_});
  out.batch = B;
  out.length = G * n;
  out.num_groups = G;
  out.num_positions = n;
  return out;
}

std::vector<double> sincos_2d(std::size_t rows, std::size_t cols, std::size_t d_pe) {
  if (d_pe % 4) throw ConfigError("positional width " + std::to_string(d_pe) + " not divisible by 4");
  const std::size_t quarter = d_pe / 4, half = d_pe / 2;
  std::vector<double> pe(rows * cols * d_pe);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double* e = &pe[(r * cols + c) * d_pe];
      for (std::size_t k = 0; k < quarter; ++k) {
        const double w = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(quarter));
        e[k] = std::sin(static_cast<double>(r) * w);
        e[quarter + k] = std::cos(static_cast<double>(r) * w);
        e[half + k] = std::sin(static_cast<double>(c) * w);
        e[half + quarter + k] = std::cos(static_cast<double>(c) * w);
      }
    }
  return pe;
}

template <std::floating_point T>
GroupPositionEncoding<T> GroupPositionEncoding<T>::make(ParamStore<T>& store, const std::string& name,
                                                        std::size_t num_groups, std::size_t width,
                                                        std::size_t d_ge, Rng& rng) {
  if (d_ge == 0 || d_ge >= width || (width - d_ge) % 4)
    throw ConfigError("encoding split " + std::to_string(d_ge) + "+" + std::to_string(width - d_ge) +
                      " of width " + std::to_string(width) + " is invalid");
  GroupPositionEncoding e;
  e.width_ = width;
  e.d_ge_ = d_ge;
  e.group_table_ = store.add_normal(name + ".group_table", {num_groups, d_ge}, 0.02, rng);
  return e;
}

template <std::floating_point T>
Tensor<T> GroupPositionEncoding<T>::encodings(const GroupedTokens<T>& in, std::size_t grid_rows,
                                              std::size_t grid_cols) const {
  const std::size_t n = in.group_ids.size();
  if (in.num_positions != grid_rows * grid_cols)
    throw ContractError("GroupPositionEncoding: " + std::to_string(in.num_positions) +
                        " positions on a " + std::to_string(grid_rows) + "x" +
                        std::to_string(grid_cols) + " grid");
  if (in.num_groups > group_table_.dim(0))
    throw ContractError("GroupPositionEncoding: more groups than encodings");
  const std::size_t d_pe = width_ - d_ge_;
  const auto table = sincos_2d(grid_rows, grid_cols, d_pe);
  std::vector<T> pe(n * d_pe);
  std::vector<std::size_t> gidx(n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto p = static_cast<std::size_t>(in.position_ids[t]);
    std::transform(table.begin() + p * d_pe, table.begin() + (p + 1) * d_pe, pe.begin() + t * d_pe,
                   [](double v) { return static_cast<T>(v); });
    gidx[t] = static_cast<std::size_t>(in.group_ids[t]);
  }
  return ops::concat_lastdim(ops::gather_rows(group_table_, gidx),
                             Tensor<T>::from({n, d_pe}, std::move(pe)));
}

template <std::floating_point T>
GroupedTokens<T> GroupPositionEncoding<T>::apply(const GroupedTokens<T>& in, std::size_t grid_rows,
                                                 std::size_t grid_cols) const {
  if (in.width() != width_)
    throw ContractError("GroupPositionEncoding: token width " + std::to_string(in.width()) +
                        " vs encoding width " + std::to_string(width_));
  GroupedTokens<T> out = in;
  out.tokens = ops::add(in.tokens, ops::reshape(encodings(in, grid_rows, grid_cols), in.tokens.shape()));
  return out;
}

template <std::floating_point T>
GroupedTokens<T> sample_groups(const GroupedTokens<T>& in, Rng& rng) {
  if (in.sampled) throw ContractError("sample_groups: sequence already sampled");
  if (in.num_groups * in.num_positions != in.length)
    throw ContractError("sample_groups: sequence is not group-major");
  if (in.num_groups == 1) {
    GroupedTokens<T> out = in;
    out.sampled = true;
    return out;
  }
  const std::size_t n = in.num_positions, d = in.width();
  GroupedTokens<T> out;
  std::vector<std::size_t> rows;
  rows.reserve(in.batch * n);
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t g = uniform_index(rng, in.num_groups);
      rows.push_back(b * in.length + g * n + i);
      out.group_ids.push_back(static_cast<std::int32_t>(g));
      out.position_ids.push_back(static_cast<std::int32_t>(i));
    }
  out.tokens = ops::reshape(ops::gather_rows(ops::reshape(in.tokens, {in.batch * in.length, d}), rows),
                            {in.batch, n, d});
  out.batch = in.batch;
  out.length = n;
  out.num_groups = in.num_groups;
  out.num_positions = n;
  out.sampled = true;
  return out;
}

template class GroupEmbedder<float>;
template class GroupEmbedder<double>;
template class GroupPositionEncoding<float>;
template class GroupPositionEncoding<double>;
template GroupedTokens<float> sample_groups(const GroupedTokens<float>&, Rng&);
template GroupedTokens<double> sample_groups(const GroupedTokens<double>&, Rng&);

}  // namespace satloc
