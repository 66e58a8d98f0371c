#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "satloc/kernels.hpp"

namespace satloc::kernels::serial {

template <std::floating_point T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      T& dst = c[i * ldc + j];
      dst = (beta == T(0) ? T(0) : beta * dst) + alpha * acc;
    }
  }
}

template <std::floating_point T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = bias.empty() ? T(0) : bias[co];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.padding);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                static_cast<std::ptrdiff_t>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
                    ix >= static_cast<std::ptrdiff_t>(g.in_w))
                  continue;
                acc += input[((b * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix] *
                       weight[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
              }
          out[((b * g.out_channels + co) * oh + oy) * ow + ox] = acc;
        }
}

template <std::floating_point T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_out,
                           std::span<const T> weight, std::span<T> grad_in) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T go = grad_out[((b * g.out_channels + co) * oh + oy) * ow + ox];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.padding);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                static_cast<std::ptrdiff_t>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
                    ix >= static_cast<std::ptrdiff_t>(g.in_w))
                  continue;
                grad_in[((b * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix] +=
                    go * weight[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
              }
        }
}

template <std::floating_point T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> input,
                            std::span<const T> grad_out, std::span<T> grad_w) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T go = grad_out[((b * g.out_channels + co) * oh + oy) * ow + ox];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.padding);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                static_cast<std::ptrdiff_t>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
                    ix >= static_cast<std::ptrdiff_t>(g.in_w))
                  continue;
                grad_w[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx] +=
                    go * input[((b * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix];
              }
        }
}

template <std::floating_point T>
std::size_t attention_forward(const AttentionGeometry& g, std::span<const T> q,
                              std::span<const T> k, std::span<const T> v,
                              std::span<const std::uint8_t> mask, std::span<T> probs,
                              std::span<T> out) {
  const std::size_t dh = g.head_dim(), d = g.width;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::size_t fallbacks = 0;
  std::vector<T> row(g.key_len);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t h = 0; h < g.heads; ++h)
      for (std::size_t i = 0; i < g.query_len; ++i) {
        const std::uint8_t* mrow = mask.empty() ? nullptr : &mask[(b * g.query_len + i) * g.key_len];
        bool any = mrow == nullptr;
        for (std::size_t j = 0; j < g.key_len && !any; ++j) any = mrow[j] != 0;
        if (!any) ++fallbacks;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < g.key_len; ++j) {
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c)
            s += q[(b * g.query_len + i) * d + h * dh + c] * k[(b * g.key_len + j) * d + h * dh + c];
          s *= scale;
          if (any && mrow && !mrow[j]) s = -std::numeric_limits<T>::infinity();
          row[j] = s;
          mx = std::max(mx, s);
        }
        T sum = 0;
        for (std::size_t j = 0; j < g.key_len; ++j) {
          row[j] = std::isinf(row[j]) ? T(0) : std::exp(row[j] - mx);
          sum += row[j];
        }
        T* prow = &probs[((b * g.heads + h) * g.query_len + i) * g.key_len];
        for (std::size_t j = 0; j < g.key_len; ++j) prow[j] = row[j] / sum;
        for (std::size_t c = 0; c < dh; ++c) {
          T acc = 0;
          for (std::size_t j = 0; j < g.key_len; ++j)
            acc += prow[j] * v[(b * g.key_len + j) * d + h * dh + c];
          out[(b * g.query_len + i) * d + h * dh + c] = acc;
        }
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

}  // namespace satloc::kernels::serial
