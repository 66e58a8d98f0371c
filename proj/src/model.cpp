#include "satloc/model.hpp"

#include <algorithm>

namespace satloc {

GroupSetting merge_groups(const GroupSetting& setting) {
  GroupSetting out;
  out.name = setting.name + "/merged";
  out.num_channels = setting.num_channels;
  out.groups.emplace_back();
  out.band_codes.emplace_back();
  for (std::size_t g = 0; g < setting.groups.size(); ++g)
    for (std::size_t k = 0; k < setting.groups[g].size(); ++k) {
      const std::size_t c = setting.groups[g][k];
      auto& all = out.groups.front();
      if (std::find(all.begin(), all.end(), c) != all.end()) continue;
      all.push_back(c);
      out.band_codes.front().push_back(setting.band_codes[g][k]);
    }
  return out;
}

ModelShape model_shape(const RunConfig& cfg, std::span<const std::string> channel_tags, bool finetune) {
  const bool inherit = !finetune || cfg.finetune.groups.setting.empty();
  const std::string& setting = inherit ? cfg.groups.setting : cfg.finetune.groups.setting;
  const bool merge = finetune ? cfg.finetune.groups.merge || (inherit && cfg.groups.merge) : cfg.groups.merge;
  ModelShape s;
  s.groups = build_group_setting(setting, channel_tags);
  if (merge) s.groups = merge_groups(s.groups);
  s.encoder = cfg.encoder;
  s.encoder.patch = cfg.views.patch;
  s.ge_width = cfg.effective_ge_width();
  const std::size_t side = cfg.views.ref_size / cfg.views.patch;
  s.ref_patches = side * side;
  s.cluster = cfg.cluster;
  return s;
}

template <std::floating_point T>
PretrainModel<T> PretrainModel<T>::make(const ModelShape& shape, std::uint64_t seed) {
  shape.encoder.validate();
  PretrainModel m;
  m.shape_ = shape;
  Rng rng = derive_rng(seed, {0x1d17});
  const std::size_t d = shape.encoder.width;
  m.embedder_ = GroupEmbedder<T>::make(m.store_, "embed", shape.groups, shape.encoder.patch, d, rng);
  m.encoding_ = GroupPositionEncoding<T>::make(m.store_, "encoding", shape.groups.num_groups(), d,
                                               shape.ge_width, rng);
  m.encoder_ = Encoder<T>::make(m.store_, "encoder", shape.encoder, rng);
  m.cross_ = CrossAttention<T>::make(m.store_, "cross", shape.encoder, rng);
  m.position_head_ = PositionHead<T>::make(m.store_, "position_head", d, shape.ref_patches, rng);
  m.cluster_head_ = ClusterHead<T>::make(m.store_, "cluster_head", d, shape.cluster, rng);
  return m;
}

template <std::floating_point T>
GroupedTokens<T> PretrainModel<T>::tokens(std::span<const PatchArray> batch, std::size_t grid_rows,
                                      std::size_t grid_cols) const {
  return encoding_.apply(embedder_.embed(batch), grid_rows, grid_cols);
}

template class PretrainModel<float>;
template class PretrainModel<double>;

}  // namespace satloc
