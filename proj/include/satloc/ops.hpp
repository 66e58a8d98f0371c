#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "satloc/tensor.hpp"

// Differentiable operations. All ops accept float or double tensors; the
// result participates in autodiff whenever any input requires a gradient.
namespace satloc::ops {

template <std::floating_point T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <std::floating_point T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <std::floating_point T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <std::floating_point T> Tensor<T> scale(const Tensor<T>& a, T s);
template <std::floating_point T> Tensor<T> sum(const Tensor<T>& a);
template <std::floating_point T> Tensor<T> mean(const Tensor<T>& a);
template <std::floating_point T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// [m,k] x [k,n] -> [m,n]
template <std::floating_point T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <std::floating_point T> Tensor<T> transpose(const Tensor<T>& a);

// x [..., in] * w [in, out] + b [out]; `b` may be undefined.
template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <std::floating_point T> Tensor<T> softmax_lastdim(const Tensor<T>& x);
template <std::floating_point T> Tensor<T> log_softmax_lastdim(const Tensor<T>& x);

// -log softmax(logits)[target] for a single 1-D logit vector.
template <std::floating_point T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::size_t target);

// sum_r weights[r] * CE(logits[r], targets[r]); rows with a negative target
// are skipped. logits is [R, K].
template <std::floating_point T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, std::span<const std::int64_t> targets,
                             std::span<const T> weights);

// sum_r weights[r] * sum_k -targets[r,k] * log_softmax(logits[r])[k]. The
// targets carry no gradient.
template <std::floating_point T>
Tensor<T> soft_cross_entropy_rows(const Tensor<T>& logits, std::span<const T> targets,
                                  std::span<const T> weights);

// -sum p log p over a 1-D probability vector.
template <std::floating_point T> Tensor<T> entropy(const Tensor<T>& p);

// Normalises over the last dimension.
template <std::floating_point T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    T eps = T(1e-6));

// Exact (erf) GELU.
template <std::floating_point T> Tensor<T> gelu(const Tensor<T>& x);

// x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout] or undefined.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t padding);

// x [B,Cin,H,W], w [Cin,Cout,kh,kw]; output side (H-1)*stride - 2*padding + kh.
template <std::floating_point T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           std::size_t stride, std::size_t padding);

// Selects rows along dimension 0.
template <std::floating_point T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices);
template <std::floating_point T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <std::floating_point T>
Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b);

template <std::floating_point T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, T eps = T(1e-12));

// Mean over dimension 0: [R, ...] -> [...].
template <std::floating_point T> Tensor<T> mean_axis0(const Tensor<T>& x);

template <std::floating_point T>
struct AttentionTrace {
  bool capture_probs = false;
  std::vector<T> probs;  // [B, H, Nq, Nk] when captured
  std::size_t fallback_rows = 0;
};

// Multi-head scaled dot-product attention with optional binary mask.
// q [B,Nq,d], k/v [B,Nk,d], mask [B,Nq,Nk] (1 = may attend) or empty.
// Masked pairs receive exactly zero weight; a row whose keys are all masked
// attends unmasked and is counted in trace->fallback_rows.
template <std::floating_point T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    std::span<const std::uint8_t> mask, AttentionTrace<T>* trace = nullptr);

}  // namespace satloc::ops
