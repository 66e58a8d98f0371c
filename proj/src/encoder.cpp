#include "satloc/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "satloc/errors.hpp"

namespace satloc {

void EncoderConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads)
    throw ConfigError("encoder width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (mlp_ratio == 0 || patch == 0) throw ConfigError("encoder mlp_ratio and patch must be positive");
}

std::vector<std::uint8_t> build_attention_mask(std::span<const std::int32_t> query_groups,
                                               std::span<const std::int32_t> key_groups,
                                               std::size_t batch, std::size_t nq, std::size_t nk,
                                               MaskMode mode) {
  if (mode == MaskMode::kNone) return {};
  if (query_groups.size() != batch * nq || key_groups.size() != batch * nk)
    throw ContractError("build_attention_mask: group id counts do not match the shapes");
  std::vector<std::uint8_t> m(batch * nq * nk);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < nq; ++i) {
      const std::int32_t gi = query_groups[b * nq + i];
      std::uint8_t* row = &m[(b * nq + i) * nk];
      for (std::size_t j = 0; j < nk; ++j) row[j] = key_groups[b * nk + j] != gi;
    }
  return m;
}

template <std::floating_point T>
AttentionBlock<T> AttentionBlock<T>::make(ParamStore<T>& store, const std::string& name,
                                          std::size_t width, std::size_t heads, std::size_t mlp_ratio,
                                          bool cross, Rng& rng) {
  AttentionBlock b;
  b.heads = heads;
  b.cross = cross;
  b.norm_q = LayerNorm<T>::make(store, name + ".norm1", width);
  if (cross) b.norm_kv = LayerNorm<T>::make(store, name + ".norm_kv", width);
  b.wq = Linear<T>::make(store, name + ".attn.q", width, width, rng);
  b.wk = Linear<T>::make(store, name + ".attn.k", width, width, rng);
  b.wv = Linear<T>::make(store, name + ".attn.v", width, width, rng);
  b.wo = Linear<T>::make(store, name + ".attn.o", width, width, rng);
  b.norm_mlp = LayerNorm<T>::make(store, name + ".norm2", width);
  b.mlp = Mlp<T>::make(store, name + ".mlp", width, width * mlp_ratio, rng);
  return b;
}

template <std::floating_point T>
Tensor<T> AttentionBlock<T>::attend(const Tensor<T>& xq, const Tensor<T>& xkv,
                                    std::span<const std::uint8_t> mask,
                                    ops::AttentionTrace<T>* trace) const {
  return wo(ops::attention(wq(xq), wk(xkv), wv(xkv), heads, mask, trace));
}

template <std::floating_point T>
Tensor<T> AttentionBlock<T>::forward(const Tensor<T>& x, std::span<const std::uint8_t> mask,
                                     ops::AttentionTrace<T>* trace) const {
  const Tensor<T> h = norm_q(x);
  const Tensor<T> y = ops::add(x, attend(h, h, mask, trace));
  return ops::add(y, mlp(norm_mlp(y)));
}

template <std::floating_point T>
Tensor<T> AttentionBlock<T>::forward_cross(const Tensor<T>& xq, const Tensor<T>& xkv,
                                           std::span<const std::uint8_t> mask,
                                           ops::AttentionTrace<T>* trace) const {
  if (!cross) throw ContractError("AttentionBlock::forward_cross on a self-attention block");
  const Tensor<T> y = ops::add(xq, attend(norm_q(xq), norm_kv(xkv), mask, trace));
  return ops::add(y, mlp(norm_mlp(y)));
}

template <std::floating_point T>
Encoder<T> Encoder<T>::make(ParamStore<T>& store, const std::string& name, const EncoderConfig& cfg,
                            Rng& rng) {
  cfg.validate();
  Encoder e;
  e.cfg_ = cfg;
  for (std::size_t l = 0; l < cfg.depth; ++l)
    e.blocks_.push_back(AttentionBlock<T>::make(store, name + ".block" + std::to_string(l), cfg.width,
                                                cfg.heads, cfg.mlp_ratio, false, rng));
  e.final_norm_ = LayerNorm<T>::make(store, name + ".norm", cfg.width);
  return e;
}

template <std::floating_point T>
Tensor<T> Encoder<T>::encode(const GroupedTokens<T>& tokens, MaskMode mode, EncodeTrace<T>* trace) const {
  if (tokens.width() != cfg_.width)
    throw ContractError("Encoder::encode: token width " + std::to_string(tokens.width()) +
                        " vs encoder width " + std::to_string(cfg_.width));
  const auto mask = build_attention_mask(tokens.group_ids, tokens.group_ids, tokens.batch,
                                         tokens.length, tokens.length, mode);
  if (trace) trace->layers.assign(blocks_.size(), {});
  Tensor<T> x = tokens.tokens;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    ops::AttentionTrace<T>* t = nullptr;
    if (trace) {
      trace->layers[l].capture_probs = trace->capture_probs;
      t = &trace->layers[l];
    }
    x = blocks_[l].forward(x, mask, t);
  }
  return final_norm_(x);
}

std::size_t visible_count(std::size_t n, double eta) {
  const double keep = std::ceil((1.0 - eta) * static_cast<double>(n) - 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, keep)));
}

template <std::floating_point T>
VisibleReference<T> mask_reference(const Tensor<T>& z_ref, std::span<const std::int32_t> group_ids,
                                   std::span<const std::int32_t> position_ids, double eta, Rng& rng) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("reference mask ratio must lie in [0, 1]");
  if (z_ref.rank() != 3) throw DimensionError("mask_reference: expected [B, N, d], got " + shape_str(z_ref.shape()));
  const std::size_t B = z_ref.dim(0), N = z_ref.dim(1), d = z_ref.dim(2);
  if (group_ids.size() != B * N || position_ids.size() != B * N)
    throw ContractError("mask_reference: id counts do not match the reference tokens");
  VisibleReference<T> out;
  out.batch = B;
  out.count = visible_count(N, eta);
  std::vector<std::size_t> rows, perm(N);
  rows.reserve(B * out.count);
  for (std::size_t b = 0; b < B; ++b) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `count` entries are a uniform subset.
    for (std::size_t i = 0; i < out.count; ++i) std::swap(perm[i], perm[i + uniform_index(rng, N - i)]);
    std::sort(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(out.count));
    for (std::size_t i = 0; i < out.count; ++i) {
      const std::size_t r = b * N + perm[i];
      rows.push_back(r);
      out.group_ids.push_back(group_ids[r]);
      out.position_ids.push_back(position_ids[r]);
    }
  }
  out.tokens = ops::reshape(ops::gather_rows(ops::reshape(z_ref, {B * N, d}), rows), {B, out.count, d});
  return out;
}

template <std::floating_point T>
CrossAttention<T> CrossAttention<T>::make(ParamStore<T>& store, const std::string& name,
                                          const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  CrossAttention c;
  c.block_ = AttentionBlock<T>::make(store, name, cfg.width, cfg.heads, cfg.mlp_ratio, true, rng);
  return c;
}

template <std::floating_point T>
Tensor<T> CrossAttention<T>::forward(const Tensor<T>& z_q, std::span<const std::int32_t> query_groups,
                                     const VisibleReference<T>& visible, bool same_group_mask,
                                     ops::AttentionTrace<T>* trace) const {
  if (z_q.rank() != 3) throw DimensionError("CrossAttention: expected z_q [B*Q, Nq, d]");
  if (visible.count == 0) throw ContractError("CrossAttention: no visible reference rows");
  const std::size_t BQ = z_q.dim(0), nq = z_q.dim(1), d = z_q.dim(2), B = visible.batch;
  if (B == 0 || BQ % B) throw ContractError("CrossAttention: query batch not a multiple of reference batch");
  const std::size_t rows = (BQ / B) * nq;
  const auto mask = build_attention_mask(query_groups, visible.group_ids, B, rows, visible.count,
                                         same_group_mask ? MaskMode::kSameGroupExclusion : MaskMode::kNone);
  const Tensor<T> u = block_.forward_cross(ops::reshape(z_q, {B, rows, d}), visible.tokens, mask, trace);
  return ops::reshape(u, {BQ, nq, d});
}

template struct AttentionBlock<float>;
template struct AttentionBlock<double>;
template class Encoder<float>;
template class Encoder<double>;
template class CrossAttention<float>;
template class CrossAttention<double>;
template VisibleReference<float> mask_reference(const Tensor<float>&, std::span<const std::int32_t>,
                                                std::span<const std::int32_t>, double, Rng&);
template VisibleReference<double> mask_reference(const Tensor<double>&, std::span<const std::int32_t>,
                                                 std::span<const std::int32_t>, double, Rng&);

}  // namespace satloc
