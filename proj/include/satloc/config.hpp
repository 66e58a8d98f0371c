#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "satloc/encoder.hpp"
#include "satloc/objectives.hpp"
#include "satloc/views.hpp"

namespace satloc {

struct GroupOptions {
  std::string setting = "S2-Similarity";
  bool merge = false;     // collapse the setting into one group (grouping off)
  bool sampling = true;
};

struct OptimOptions {
  double lr = 6.25e-5;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t epochs = 100;
  std::size_t steps = 0;  // 0 = epochs * steps per epoch
  std::size_t warmup_steps = 0;  // 0 = warmup_fraction of the total
  double warmup_fraction = 0.05;

  std::uint64_t warmup_for(std::uint64_t total_steps) const {
    if (warmup_steps) return warmup_steps;
    return static_cast<std::uint64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
  }
};

struct FinetuneOptions {
  std::string train_data;
  std::string val_data;
  std::string checkpoint;  // empty = random init
  std::size_t classes = 2;
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  std::size_t warmup_steps = 0;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::size_t runs = 1;
  std::size_t eval_every = 0;  // 0 = only at the end
  bool same_group_mask = false;
  // Empty setting = the pretraining groups (merged when either merge is set).
  GroupOptions groups{"", false, false};
};

/// Every run knob, read from a flat `section.key = value` file.
struct RunConfig {
  std::string data_path;
  ViewSamplingConfig views = ViewSamplingConfig::desk();
  GroupOptions groups;
  bool same_group_mask = false;
  double reference_mask_ratio = 0.8;
  bool cluster_enabled = true;
  ClusterConfig cluster;
  EncoderConfig encoder = EncoderConfig::desk();
  std::size_t ge_width = 0;  // 0 = width / 4
  OptimOptions optim;
  FinetuneOptions finetune;
  std::uint64_t seed = 0;
  bool reference_noise = false;  // replace reference views with noise

  // Unknown keys and malformed values throw ConfigError naming the key.
  static RunConfig parse(std::string_view text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  // Canonical "key = value" lines for every knob, in a fixed order.
  std::string to_text() const;
  // Applies one "key=value" override.
  void set(const std::string& key, const std::string& value);
  void validate() const;

  std::size_t effective_ge_width() const { return ge_width ? ge_width : encoder.width / 4; }
  // FNV-1a over the knobs that shape model parameters.
  std::uint64_t model_hash() const;
};

}  // namespace satloc
