#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "satloc/config.hpp"
#include "satloc/encoder.hpp"
#include "satloc/groups.hpp"
#include "satloc/objectives.hpp"

namespace satloc {

// Everything that fixes parameter names and shapes.
struct ModelShape {
  GroupSetting groups;
  EncoderConfig encoder;
  std::size_t ge_width = 0;
  std::size_t ref_patches = 0;  // position-head classes
  ClusterConfig cluster;
};

// One group holding every channel of `setting`, first occurrence order.
GroupSetting merge_groups(const GroupSetting& setting);

// Resolves the group setting against the dataset channels. `finetune` selects
// the finetune.groups knobs.
ModelShape model_shape(const RunConfig& cfg, std::span<const std::string> channel_tags,
                       bool finetune = false);

/// Backbone plus pretraining heads, all registered in one ParamStore.
template <std::floating_point T>
class PretrainModel {
 public:
  static PretrainModel make(const ModelShape& shape, std::uint64_t seed);

  PretrainModel(const PretrainModel&) = delete;
  PretrainModel& operator=(const PretrainModel&) = delete;
  PretrainModel(PretrainModel&&) = default;
  PretrainModel& operator=(PretrainModel&&) = default;

  // Group embedding plus group/position encoding.
  GroupedTokens<T> tokens(std::span<const PatchArray> batch, std::size_t grid_rows,
                          std::size_t grid_cols) const;

  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const ModelShape& shape() const { return shape_; }
  const GroupEmbedder<T>& embedder() const { return embedder_; }
  const GroupPositionEncoding<T>& encoding() const { return encoding_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const CrossAttention<T>& cross() const { return cross_; }
  const PositionHead<T>& position_head() const { return position_head_; }
  ClusterHead<T>& cluster_head() { return cluster_head_; }
  const ClusterHead<T>& cluster_head() const { return cluster_head_; }

 private:
  PretrainModel() = default;

  ModelShape shape_;
  ParamStore<T> store_;
  GroupEmbedder<T> embedder_;
  GroupPositionEncoding<T> encoding_;
  Encoder<T> encoder_;
  CrossAttention<T> cross_;
  PositionHead<T> position_head_;
  ClusterHead<T> cluster_head_;
};

extern template class PretrainModel<float>;
extern template class PretrainModel<double>;

}  // namespace satloc
