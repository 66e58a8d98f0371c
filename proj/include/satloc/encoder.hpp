#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "satloc/groups.hpp"
#include "satloc/params.hpp"

namespace satloc {

struct EncoderConfig {
  std::size_t depth = 4;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patch = 8;

  static EncoderConfig desk() { return {}; }
  static EncoderConfig full_scale() { return {12, 384, 6, 4, 16}; }
  // Throws ConfigError unless width is a positive multiple of heads.
  void validate() const;
};

enum class MaskMode { kNone, kSameGroupExclusion };

// [batch, nq, nk] with 1 where query i may attend key j. Under exclusion,
// entries are 0 exactly when the two group ids match. kNone yields an empty
// mask.
std::vector<std::uint8_t> build_attention_mask(std::span<const std::int32_t> query_groups,
                                               std::span<const std::int32_t> key_groups,
                                               std::size_t batch, std::size_t nq, std::size_t nk,
                                               MaskMode mode);

template <std::floating_point T>
struct EncodeTrace {
  bool capture_probs = false;
  std::vector<ops::AttentionTrace<T>> layers;
  std::size_t fallback_rows() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.fallback_rows;
    return n;
  }
};

/// Pre-norm transformer block. In cross mode the queries come from one
/// sequence and keys/values from another, each with its own layernorm.
template <std::floating_point T>
struct AttentionBlock {
  LayerNorm<T> norm_q, norm_kv, norm_mlp;
  Linear<T> wq, wk, wv, wo;
  Mlp<T> mlp;
  std::size_t heads = 1;
  bool cross = false;

  static AttentionBlock make(ParamStore<T>& store, const std::string& name, std::size_t width,
                             std::size_t heads, std::size_t mlp_ratio, bool cross, Rng& rng);

  // Attention sublayer on already-normalised inputs, including the output projection.
  Tensor<T> attend(const Tensor<T>& xq, const Tensor<T>& xkv, std::span<const std::uint8_t> mask,
                   ops::AttentionTrace<T>* trace) const;
  Tensor<T> forward(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                    ops::AttentionTrace<T>* trace = nullptr) const;
  Tensor<T> forward_cross(const Tensor<T>& xq, const Tensor<T>& xkv, std::span<const std::uint8_t> mask,
                          ops::AttentionTrace<T>* trace = nullptr) const;
};

template <std::floating_point T>
class Encoder {
 public:
  static Encoder make(ParamStore<T>& store, const std::string& name, const EncoderConfig& cfg, Rng& rng);

  // Tokens [B, N, d] -> Z [B, N, d]; the mask applies to every layer.
  Tensor<T> encode(const GroupedTokens<T>& tokens, MaskMode mode, EncodeTrace<T>* trace = nullptr) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  std::vector<AttentionBlock<T>> blocks_;
  LayerNorm<T> final_norm_;
};

/// Reference rows left visible to the queries.
template <std::floating_point T>
struct VisibleReference {
  Tensor<T> tokens;  // [B, count, d]
  std::size_t batch = 0;
  std::size_t count = 0;
  std::vector<std::int32_t> group_ids;     // batch * count
  std::vector<std::int32_t> position_ids;  // batch * count
};

// ceil((1 - eta) * n), robust to round-off in 1 - eta.
std::size_t visible_count(std::size_t n, double eta);

// Keeps visible_count(N, eta) rows per sample, uniformly without replacement,
// in ascending original order. Throws ConfigError unless 0 <= eta <= 1.
template <std::floating_point T>
VisibleReference<T> mask_reference(const Tensor<T>& z_ref, std::span<const std::int32_t> group_ids,
                                   std::span<const std::int32_t> position_ids, double eta, Rng& rng);

/// Single cross-attention block from query tokens to visible reference rows.
template <std::floating_point T>
class CrossAttention {
 public:
  static CrossAttention make(ParamStore<T>& store, const std::string& name, const EncoderConfig& cfg,
                             Rng& rng);

  // z_q [B*Q, Nq, d] with Q query views per reference sample; visible.tokens
  // [B, Nv, d] with Nv >= 1. Returns U [B*Q, Nq, d].
  Tensor<T> forward(const Tensor<T>& z_q, std::span<const std::int32_t> query_groups,
                    const VisibleReference<T>& visible, bool same_group_mask,
                    ops::AttentionTrace<T>* trace = nullptr) const;

  const AttentionBlock<T>& block() const { return block_; }

 private:
  AttentionBlock<T> block_;
};

}  // namespace satloc
