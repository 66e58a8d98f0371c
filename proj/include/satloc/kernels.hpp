#pragma once

// Dense compute kernels. Every kernel exists twice:
//   kernels::serial   - plain loops, the reference the tests compare against
//   kernels::parallel - OpenMP-parallel, cache-aware versions used by the ops
// Both namespaces share signatures and must agree to rounding.

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <span>

namespace satloc::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t in_h = 1, in_w = 1;
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_h() const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
};

struct AttentionGeometry {
  std::size_t batch = 1;
  std::size_t query_len = 1;
  std::size_t key_len = 1;
  std::size_t width = 1;  // model width d; heads split it evenly
  std::size_t heads = 1;

  std::size_t head_dim() const { return width / heads; }
};

#define SATLOC_KERNEL_DECLS                                                                     \
  /* C = alpha * op(A) * op(B) + beta * C with op(A): m x k, op(B): k x n. */                   \
  template <std::floating_point T>                                                             \
  void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,  \
            const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,             \
            std::size_t ldc);                                                                  \
                                                                                               \
  /* input [B,Cin,H,W], weight [Cout,Cin,kh,kw], optional bias [Cout] -> out [B,Cout,Ho,Wo] */ \
  template <std::floating_point T>                                                             \
  void conv2d_forward(const ConvGeometry& g, std::span<const T> input,                         \
                      std::span<const T> weight, std::span<const T> bias, std::span<T> out);   \
                                                                                               \
  /* grad_in += conv2d^T(grad_out) */                                                          \
  template <std::floating_point T>                                                             \
  void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out,               \
                             std::span<const T> weight, std::span<T> grad_in);                 \
                                                                                               \
  /* grad_w += correlation of input with grad_out */                                           \
  template <std::floating_point T>                                                             \
  void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> input,                 \
                              std::span<const T> grad_out, std::span<T> grad_w);               \
                                                                                               \
  /* Multi-head scaled dot-product attention. q [B,Nq,d], k/v [B,Nk,d]. mask, when non-empty,  \
     is [B,Nq,Nk] with 1 = may attend. probs receives [B,H,Nq,Nk]. Returns the number of       \
     (batch, head, row) triples whose keys were all masked and fell back to unmasked. */       \
  template <std::floating_point T>                                                             \
  std::size_t attention_forward(const AttentionGeometry& g, std::span<const T> q,              \
                                std::span<const T> k, std::span<const T> v,                    \
                                std::span<const std::uint8_t> mask, std::span<T> probs,        \
                                std::span<T> out);

namespace serial {
SATLOC_KERNEL_DECLS
}  // namespace serial

namespace parallel {
SATLOC_KERNEL_DECLS
int max_threads();
}  // namespace parallel

#undef SATLOC_KERNEL_DECLS

}  // namespace satloc::kernels
