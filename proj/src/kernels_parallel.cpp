#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "satloc/kernels.hpp"

namespace satloc::kernels::parallel {

namespace {

// Work below this many multiply-adds stays on the calling thread.
constexpr std::size_t kParallelThreshold = 1 << 15;

template <std::floating_point T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, std::size_t ld,
                    std::vector<T>& dst) {
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * ld + c];
}

// Scales rows [i0, i1) of C by beta (beta = 0 overwrites, so NaNs do not leak).
template <std::floating_point T>
void scale_rows(std::size_t i0, std::size_t i1, std::size_t n, T beta, T* c, std::size_t ldc) {
  for (std::size_t i = i0; i < i1; ++i) {
    T* crow = c + i * ldc;
    if (beta == T(0))
      std::fill(crow, crow + n, T(0));
    else if (beta != T(1))
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
  }
}

// Element (i, p) of A lives at a[i * ars + p * aks].
struct AStride {
  std::size_t row, depth;
};

// MR x NR register tile of C += alpha * A * B over the full k extent.
template <std::floating_point T, std::size_t MR, std::size_t NR>
inline void tile(std::size_t k, T alpha, const T* a, AStride as, const T* b, std::size_t ldb, T* c,
                 std::size_t ldc) {
  T acc[MR][NR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[r * as.row + p * as.depth];
#pragma omp simd
      for (std::size_t j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
#pragma omp simd
    for (std::size_t j = 0; j < NR; ++j) c[r * ldc + j] += alpha * acc[r][j];
}

// C[rows i0..i1) = alpha * A * B + beta * C, A: m x k (lda), B: k x n (ldb).
template <std::floating_point T>
void gemm_nn_rows(std::size_t i0, std::size_t i1, std::size_t n, std::size_t k, T alpha,
                  const T* a, AStride as, const T* b, std::size_t ldb, T beta, T* c,
                  std::size_t ldc) {
  constexpr std::size_t MR = 4;
  constexpr std::size_t NR = 128 / sizeof(T);  // two 512-bit vectors
  scale_rows(i0, i1, n, beta, c, ldc);
  std::size_t i = i0;
  for (; i + MR <= i1; i += MR) {
    std::size_t j = 0;
    const T* ai = a + i * as.row;
    for (; j + NR <= n; j += NR) tile<T, MR, NR>(k, alpha, ai, as, b + j, ldb, c + i * ldc + j, ldc);
    for (; j + NR / 4 <= n; j += NR / 4) tile<T, MR, NR / 4>(k, alpha, ai, as, b + j, ldb, c + i * ldc + j, ldc);
    for (; j < n; ++j)
      for (std::size_t r = 0; r < MR; ++r) {
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += ai[r * as.row + p * as.depth] * b[p * ldb + j];
        c[(i + r) * ldc + j] += alpha * acc;
      }
  }
  for (; i < i1; ++i) {
    T* crow = c + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = alpha * a[i * as.row + p * as.depth];
      const T* brow = b + p * ldb;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) crow[j] += v * brow[j];
    }
  }
}

template <std::floating_point T>
void gemm_local(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
                const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
                std::size_t ldc, bool allow_threads) {
  std::vector<T> b_packed;
  const AStride as = trans_a ? AStride{1, lda} : AStride{lda, 1};
  if (trans_b) {
    transpose_into(b, n, k, ldb, b_packed);
    b = b_packed.data();
    ldb = n;
  }
  const bool threaded = allow_threads && m * n * k >= kParallelThreshold && m >= 8;
  if (!threaded) {
    gemm_nn_rows(0, m, n, k, alpha, a, as, b, ldb, beta, c, ldc);
    return;
  }
  const std::ptrdiff_t blocks = static_cast<std::ptrdiff_t>((m + 3) / 4);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * 4;
    gemm_nn_rows(i0, std::min(m, i0 + 4), n, k, alpha, a, as, b, ldb, beta, c, ldc);
  }
}

inline bool in_range(std::ptrdiff_t v, std::size_t hi) {
  return v >= 0 && v < static_cast<std::ptrdiff_t>(hi);
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <std::floating_point T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  gemm_local(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc, true);
}

template <std::floating_point T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto planes = static_cast<std::ptrdiff_t>(g.batch * g.out_channels);
#pragma omp parallel for schedule(static) if (planes > 1)
  for (std::ptrdiff_t plane = 0; plane < planes; ++plane) {
    const std::size_t b = static_cast<std::size_t>(plane) / g.out_channels;
    const std::size_t co = static_cast<std::size_t>(plane) % g.out_channels;
    T* dst = &out[static_cast<std::size_t>(plane) * oh * ow];
    std::fill(dst, dst + oh * ow, bias.empty() ? T(0) : bias[co]);
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      const T* src = &input[(b * g.in_channels + ci) * g.in_h * g.in_w];
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          const T w = weight[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (!in_range(iy, g.in_h)) continue;
            const T* srow = src + iy * g.in_w;
            T* drow = dst + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.padding);
              if (in_range(ix, g.in_w)) drow[ox] += w * srow[ix];
            }
          }
        }
    }
  }
}

template <std::floating_point T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out,
                           std::span<const T> weight, std::span<T> grad_in) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto planes = static_cast<std::ptrdiff_t>(g.batch * g.in_channels);
#pragma omp parallel for schedule(static) if (planes > 1)
  for (std::ptrdiff_t plane = 0; plane < planes; ++plane) {
    const std::size_t b = static_cast<std::size_t>(plane) / g.in_channels;
    const std::size_t ci = static_cast<std::size_t>(plane) % g.in_channels;
    T* dst = &grad_in[static_cast<std::size_t>(plane) * g.in_h * g.in_w];
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const T* src = &grad_out[(b * g.out_channels + co) * oh * ow];
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          const T w = weight[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (!in_range(iy, g.in_h)) continue;
            const T* srow = src + oy * ow;
            T* drow = dst + iy * g.in_w;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.padding);
              if (in_range(ix, g.in_w)) drow[ix] += w * srow[ox];
            }
          }
        }
    }
  }
}

template <std::floating_point T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> input,
                            std::span<const T> grad_out, std::span<T> grad_w) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto pairs = static_cast<std::ptrdiff_t>(g.out_channels * g.in_channels);
#pragma omp parallel for schedule(static) if (pairs > 1)
  for (std::ptrdiff_t pair = 0; pair < pairs; ++pair) {
    const std::size_t co = static_cast<std::size_t>(pair) / g.in_channels;
    const std::size_t ci = static_cast<std::size_t>(pair) % g.in_channels;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T acc = 0;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* src = &input[(b * g.in_channels + ci) * g.in_h * g.in_w];
          const T* go = &grad_out[(b * g.out_channels + co) * oh * ow];
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (!in_range(iy, g.in_h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.padding);
              if (in_range(ix, g.in_w)) acc += go[oy * ow + ox] * src[iy * g.in_w + ix];
            }
          }
        }
        grad_w[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx] += acc;
      }
  }
}

template <std::floating_point T>
std::size_t attention_forward(const AttentionGeometry& g, std::span<const T> q,
                              std::span<const T> k, std::span<const T> v,
                              std::span<const std::uint8_t> mask, std::span<T> probs,
                              std::span<T> out) {
  const std::size_t dh = g.head_dim(), d = g.width, nq = g.query_len, nk = g.key_len;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const auto units = static_cast<std::ptrdiff_t>(g.batch * g.heads);
  std::size_t fallbacks = 0;
#pragma omp parallel for schedule(static) reduction(+ : fallbacks) if (units > 1)
  for (std::ptrdiff_t unit = 0; unit < units; ++unit) {
    const std::size_t b = static_cast<std::size_t>(unit) / g.heads;
    const std::size_t h = static_cast<std::size_t>(unit) % g.heads;
    const T* qh = &q[b * nq * d + h * dh];
    const T* kh = &k[b * nk * d + h * dh];
    const T* vh = &v[b * nk * d + h * dh];
    T* p = &probs[static_cast<std::size_t>(unit) * nq * nk];
    gemm_local(false, true, nq, nk, dh, scale, qh, d, kh, d, T(0), p, nk, false);
    for (std::size_t i = 0; i < nq; ++i) {
      T* row = p + i * nk;
      const std::uint8_t* mrow = mask.empty() ? nullptr : &mask[(b * nq + i) * nk];
      if (mrow) {
        const bool any = std::any_of(mrow, mrow + nk, [](std::uint8_t m) { return m != 0; });
        if (any) {
          for (std::size_t j = 0; j < nk; ++j)
            if (!mrow[j]) row[j] = -std::numeric_limits<T>::infinity();
        } else {
          ++fallbacks;
        }
      }
      const T mx = *std::max_element(row, row + nk);
      T sum = 0;
      for (std::size_t j = 0; j < nk; ++j) {
        row[j] = std::isinf(row[j]) ? T(0) : std::exp(row[j] - mx);
        sum += row[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < nk; ++j) row[j] *= inv;
    }
    gemm_local(false, false, nq, dh, nk, T(1), p, nk, vh, d, T(0), &out[b * nq * d + h * dh], d,
               false);
  }
  return fallbacks;
}

#define SATLOC_INSTANTIATE(T)                                                                  \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, T, const T*,        \
                        std::size_t, const T*, std::size_t, T, T*, std::size_t);               \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, \
                                  std::span<const T>, std::span<T>);                           \
  template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>,              \
                                         std::span<const T>, std::span<T>);                    \
  template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>,             \
                                          std::span<const T>, std::span<T>);                   \
  template std::size_t attention_forward<T>(const AttentionGeometry&, std::span<const T>,      \
                                            std::span<const T>, std::span<const T>,            \
                                            std::span<const std::uint8_t>, std::span<T>,       \
                                            std::span<T>);
SATLOC_INSTANTIATE(float)
SATLOC_INSTANTIATE(double)
#undef SATLOC_INSTANTIATE

}  // namespace satloc::kernels::parallel
