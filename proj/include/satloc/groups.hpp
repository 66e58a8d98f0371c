#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "satloc/params.hpp"
#include "satloc/views.hpp"

namespace satloc {

/// Channel groups over a dataset's channel list. A channel may appear in
/// several groups.
struct GroupSetting {
  std::string name;
  std::vector<std::vector<std::size_t>> groups;    // channel indices
  std::vector<std::vector<std::string>> band_codes;  // same shape as groups
  std::size_t num_channels = 0;                    // channels in the source data

  std::size_t num_groups() const { return groups.size(); }
};

// Named presets: "S2-Similarity", "S2+S1-Separate", "RGBN+S1-Separate",
// "S2+S1-Mixed", "S2+S1+DEM-Separate", "Best", "All" (one group of every
// channel). Anything else is parsed as an explicit list "B2,B3|B4|DEM".
// Throws ConfigError for unknown presets or bands missing from `channel_tags`.
GroupSetting build_group_setting(std::string_view preset, std::span<const std::string> channel_tags);
GroupSetting group_setting_from_codes(std::string name,
                                      const std::vector<std::vector<std::string>>& codes,
                                      std::span<const std::string> channel_tags);
std::vector<std::string> group_preset_names();
// Band codes of a named preset; empty for "All". Throws ConfigError when unknown.
std::vector<std::vector<std::string>> group_preset_codes(std::string_view preset);

/// Token sequence [B, L, d] with per-token group and position ids.
///
/// Unsampled sequences are group-major per sample (token g*N + i); sampled
/// sequences hold one token per position in position order.
template <std::floating_point T>
struct GroupedTokens {
  Tensor<T> tokens;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t num_groups = 0;
  std::size_t num_positions = 0;
  bool sampled = false;
  std::vector<std::int32_t> group_ids;     // batch * length
  std::vector<std::int32_t> position_ids;  // batch * length

  std::size_t width() const { return tokens.rank() == 3 ? tokens.dim(2) : 0; }
};

// One linear patch embedding per group over that group's P*P*|g| inputs.
template <std::floating_point T>
class GroupEmbedder {
 public:
  static GroupEmbedder make(ParamStore<T>& store, const std::string& name, const GroupSetting& setting,
                            std::size_t patch, std::size_t width, Rng& rng);

  // All patch arrays must share count and channel layout.
  GroupedTokens<T> embed(std::span<const PatchArray> batch) const;

  const GroupSetting& setting() const { return setting_; }
  const std::vector<Linear<T>>& projections() const { return proj_; }
  std::size_t width() const { return width_; }

 private:
  GroupSetting setting_;
  std::size_t patch_ = 0;
  std::size_t width_ = 0;
  std::vector<Linear<T>> proj_;
};

// Fixed 2-D sine-cosine table [rows*cols, d_pe]. Lanes [0, d_pe/2) encode the
// grid row, the rest the column; each half is sin(p*w_k) then cos(p*w_k) with
// w_k = 10000^(-k / (d_pe/4)).
std::vector<double> sincos_2d(std::size_t rows, std::size_t cols, std::size_t d_pe);

/// Adds concat(GE[group], PE[position]); GE is learned, PE fixed.
template <std::floating_point T>
class GroupPositionEncoding {
 public:
  // Requires d_ge > 0 and (width - d_ge) % 4 == 0, else ConfigError.
  static GroupPositionEncoding make(ParamStore<T>& store, const std::string& name,
                                    std::size_t num_groups, std::size_t width, std::size_t d_ge,
                                    Rng& rng);
  static std::size_t default_ge_width(std::size_t width) { return width / 4; }

  GroupedTokens<T> apply(const GroupedTokens<T>& in, std::size_t grid_rows, std::size_t grid_cols) const;
  // Encoding rows [B*L, d] for `in`'s ids.
  Tensor<T> encodings(const GroupedTokens<T>& in, std::size_t grid_rows, std::size_t grid_cols) const;

  const Tensor<T>& group_table() const { return group_table_; }
  std::size_t d_ge() const { return d_ge_; }
  std::size_t d_pe() const { return width_ - d_ge_; }

 private:
  Tensor<T> group_table_;  // [G, d_ge]
  std::size_t width_ = 0;
  std::size_t d_ge_ = 0;
};

// Keeps one uniformly chosen group per position, independently per sample.
template <std::floating_point T>
GroupedTokens<T> sample_groups(const GroupedTokens<T>& in, Rng& rng);

}  // namespace satloc
