#include "satloc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "satloc/kernels.hpp"

namespace satloc::ops {

namespace kp = kernels::parallel;

namespace {

template <std::floating_point T>
using NodeRef = std::shared_ptr<Node<T>>;

// Builds an op result. Inputs and the backward closure are only retained
// when some input needs a gradient.
template <std::floating_point T>
Tensor<T> make_result(const char* name, Shape shape, std::vector<T> value,
                      std::vector<NodeRef<T>> inputs, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->op = name;
  n->shape = std::move(shape);
  n->value = std::move(value);
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodeRef<T>& in) { return in && in->requires_grad; });
  if (needs) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(fn);
  }
  return Tensor<T>(std::move(n));
}

template <std::floating_point T>
bool wants(const NodeRef<T>& n) {
  return n && n->requires_grad;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!wants(in)) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "sub: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!wants(in)) continue;
      const T sign = k == 0 ? T(1) : T(-1);
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& a = self.inputs[0];
    auto& b = self.inputs[1];
    if (wants(a)) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (wants(b)) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result<T>("scale", a.shape(), std::move(out), {a.node()}, [s](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>("sum", {}, {acc}, {a.node()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  require(a.numel() > 0, "mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a.node()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  kp::gemm<T>(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), out.data(), n);
  return make_result<T>("matmul", {m, n}, std::move(out), {a.node(), b.node()},
                        [m, n, k](Node<T>& self) {
                          auto& a = self.inputs[0];
                          auto& b = self.inputs[1];
                          if (wants(a))
                            kp::gemm<T>(false, true, m, k, n, T(1), self.grad.data(), n,
                                        b->value.data(), n, T(1), a->ensure_grad().data(), k);
                          if (wants(b))
                            kp::gemm<T>(true, false, k, n, m, T(1), a->value.data(), k,
                                        self.grad.data(), n, T(1), b->ensure_grad().data(), n);
                        });
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& a) {
  require(a.rank() == 2, "transpose: expects rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  return make_result<T>("transpose", {c, r}, std::move(out), {a.node()}, [r, c](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.rank() >= 1 && w.rank() == 2 && last_dim(x.shape()) == w.dim(0),
          "linear: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  const std::size_t in = w.dim(0), out_w = w.dim(1), rows = x.numel() / in;
  if (b.defined()) require(b.numel() == out_w, "linear: bias " + shape_str(b.shape()));
  std::vector<T> out(rows * out_w);
  if (b.defined())
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(b.data().begin(), b.data().end(), out.begin() + r * out_w);
  kp::gemm<T>(false, false, rows, out_w, in, T(1), x.data().data(), in, w.data().data(), out_w,
              b.defined() ? T(1) : T(0), out.data(), out_w);
  Shape shape = x.shape();
  shape.back() = out_w;
  std::vector<NodeRef<T>> inputs{x.node(), w.node()};
  if (b.defined()) inputs.push_back(b.node());
  return make_result<T>("linear", std::move(shape), std::move(out), std::move(inputs),
                        [rows, in, out_w](Node<T>& self) {
                          auto& x = self.inputs[0];
                          auto& w = self.inputs[1];
                          const T* gy = self.grad.data();
                          if (wants(x))
                            kp::gemm<T>(false, true, rows, in, out_w, T(1), gy, out_w,
                                        w->value.data(), out_w, T(1), x->ensure_grad().data(), in);
                          if (wants(w))
                            kp::gemm<T>(true, false, in, out_w, rows, T(1), x->value.data(), in, gy,
                                        out_w, T(1), w->ensure_grad().data(), out_w);
                          if (self.inputs.size() > 2 && wants(self.inputs[2])) {
                            auto& gb = self.inputs[2]->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < out_w; ++j) gb[j] += gy[r * out_w + j];
                          }
                        });
}

template <std::floating_point T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t k = last_dim(x.shape());
  require(k > 0, "softmax_lastdim: empty last dimension");
  const std::size_t rows = x.numel() / k;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * k;
    T* o = out.data() + r * k;
    const T mx = *std::max_element(in, in + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) o[j] /= s;
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x.node()}, [rows, k](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * k;
      const T* gy = self.grad.data() + r * k;
      T dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += y[j] * (gy[j] - dot);
    }
  });
}

template <std::floating_point T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  const std::size_t k = last_dim(x.shape());
  require(k > 0, "log_softmax_lastdim: empty last dimension");
  const std::size_t rows = x.numel() / k;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * k;
    const T mx = *std::max_element(in, in + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(in[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = in[j] - lse;
  }
  return make_result<T>("log_softmax", x.shape(), std::move(out), {x.node()},
                        [rows, k](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* y = self.value.data() + r * k;
                            const T* gy = self.grad.data() + r * k;
                            T total = 0;
                            for (std::size_t j = 0; j < k; ++j) total += gy[j];
                            for (std::size_t j = 0; j < k; ++j)
                              g[r * k + j] += gy[j] - std::exp(y[j]) * total;
                          }
                        });
}

namespace {

// Row-wise softmax of a [rows, k] buffer; returns the log-sum-exp per row.
template <std::floating_point T>
std::vector<T> row_softmax(std::span<const T> logits, std::size_t rows, std::size_t k,
                           std::vector<T>& probs) {
  probs.resize(rows * k);
  std::vector<T> lse(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = logits.data() + r * k;
    const T mx = *std::max_element(in, in + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += (probs[r * k + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= s;
    lse[r] = mx + std::log(s);
  }
  return lse;
}

}  // namespace

template <std::floating_point T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::size_t target) {
  const std::size_t k = logits.numel();
  if (target >= k)
    throw IndexError("cross_entropy_from_logits: target " + std::to_string(target) +
                     " outside " + std::to_string(k) + " classes");
  const std::int64_t t = static_cast<std::int64_t>(target);
  const T w = 1;
  return cross_entropy_rows(reshape(logits, {1, k}), std::span<const std::int64_t>(&t, 1),
                            std::span<const T>(&w, 1));
}

template <std::floating_point T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, std::span<const std::int64_t> targets,
                             std::span<const T> weights) {
  require(logits.rank() == 2, "cross_entropy_rows: logits must be [R,K]");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  require(targets.size() == rows && weights.size() == rows,
          "cross_entropy_rows: targets/weights length must equal rows");
  for (auto t : targets)
    if (t >= static_cast<std::int64_t>(k))
      throw IndexError("cross_entropy_rows: target " + std::to_string(t) + " outside " +
                       std::to_string(k) + " classes");
  std::vector<T> probs;
  const auto lse = row_softmax(logits.data(), rows, k, probs);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r)
    if (targets[r] >= 0) loss += weights[r] * (lse[r] - logits.data()[r * k + targets[r]]);
  std::vector<std::int64_t> tg(targets.begin(), targets.end());
  std::vector<T> wt(weights.begin(), weights.end());
  return make_result<T>(
      "cross_entropy", {}, {loss}, {logits.node()},
      [rows, k, probs = std::move(probs), tg = std::move(tg), wt = std::move(wt)](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const T go = self.grad[0];
        for (std::size_t r = 0; r < rows; ++r) {
          if (tg[r] < 0) continue;
          const T s = go * wt[r];
          for (std::size_t j = 0; j < k; ++j) g[r * k + j] += s * probs[r * k + j];
          g[r * k + static_cast<std::size_t>(tg[r])] -= s;
        }
      });
}

template <std::floating_point T>
Tensor<T> soft_cross_entropy_rows(const Tensor<T>& logits, std::span<const T> targets,
                                  std::span<const T> weights) {
  require(logits.rank() == 2, "soft_cross_entropy_rows: logits must be [R,K]");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  require(targets.size() == rows * k && weights.size() == rows,
          "soft_cross_entropy_rows: targets must be [R,K] and weights [R]");
  std::vector<T> probs;
  const auto lse = row_softmax(logits.data(), rows, k, probs);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j)
      loss += weights[r] * targets[r * k + j] * (lse[r] - logits.data()[r * k + j]);
  std::vector<T> tg(targets.begin(), targets.end());
  std::vector<T> wt(weights.begin(), weights.end());
  return make_result<T>(
      "soft_cross_entropy", {}, {loss}, {logits.node()},
      [rows, k, probs = std::move(probs), tg = std::move(tg), wt = std::move(wt)](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const T go = self.grad[0];
        for (std::size_t r = 0; r < rows; ++r) {
          T mass = 0;
          for (std::size_t j = 0; j < k; ++j) mass += tg[r * k + j];
          const T s = go * wt[r];
          for (std::size_t j = 0; j < k; ++j)
            g[r * k + j] += s * (probs[r * k + j] * mass - tg[r * k + j]);
        }
      });
}

template <std::floating_point T>
Tensor<T> entropy(const Tensor<T>& p) {
  T h = 0;
  for (T v : p.data())
    if (v > 0) h -= v * std::log(v);
  return make_result<T>("entropy", {}, {h}, {p.node()}, [](Node<T>& self) {
    auto& in = self.inputs[0];
    auto& g = in->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] -= self.grad[0] * (std::log(std::max(in->value[i], std::numeric_limits<T>::min())) + T(1));
  });
}

template <std::floating_point T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t k = last_dim(x.shape());
  require(gain.numel() == k && bias.numel() == k,
          "layernorm: gain/bias width must equal " + std::to_string(k));
  const std::size_t rows = k ? x.numel() / k : 0;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * k;
    T mu = 0;
    for (std::size_t j = 0; j < k; ++j) mu += in[j];
    mu /= static_cast<T>(k);
    T var = 0;
    for (std::size_t j = 0; j < k; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(k);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < k; ++j) {
      xhat[r * k + j] = (in[j] - mu) * rstd[r];
      out[r * k + j] = xhat[r * k + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return make_result<T>(
      "layernorm", x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [rows, k, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        auto& x = self.inputs[0];
        auto& gain = self.inputs[1];
        auto& bias = self.inputs[2];
        const T* gy = self.grad.data();
        if (wants(gain)) {
          auto& gg = gain->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < k; ++j) gg[j] += gy[r * k + j] * xhat[r * k + j];
        }
        if (wants(bias)) {
          auto& gb = bias->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < k; ++j) gb[j] += gy[r * k + j];
        }
        if (wants(x)) {
          auto& gx = x->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < k; ++j) {
              const T dxh = gy[r * k + j] * gain->value[j];
              m1 += dxh;
              m2 += dxh * xhat[r * k + j];
            }
            m1 /= static_cast<T>(k);
            m2 /= static_cast<T>(k);
            for (std::size_t j = 0; j < k; ++j) {
              const T dxh = gy[r * k + j] * gain->value[j];
              gx[r * k + j] += rstd[r] * (dxh - m1 - xhat[r * k + j] * m2);
            }
          }
        }
      });
}

template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.numel());
  std::vector<T> cdf(x.numel());  // Phi(x), reused by the backward pass
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    cdf[i] = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    out[i] = v * cdf[i];
  }
  return make_result<T>("gelu", x.shape(), std::move(out), {x.node()},
                        [inv_sqrt2, cdf = std::move(cdf)](Node<T>& self) {
                          auto& in = self.inputs[0];
                          auto& g = in->ensure_grad();
                          const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T v = in->value[i];
                            g[i] += self.grad[i] * (cdf[i] + v * std::exp(T(-0.5) * v * v) * inv_sqrt2pi);
                          }
                        });
}

namespace {

template <std::floating_point T>
void add_channel_bias_grad(std::span<const T> grad_out, std::size_t batch, std::size_t channels,
                           std::size_t plane, std::vector<T>& gb) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const T* p = grad_out.data() + (b * channels + c) * plane;
      T acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      gb[c] += acc;
    }
}

}  // namespace

template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t padding) {
  require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(1),
          "conv2d: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(x.dim(2) + 2 * padding >= w.dim(2) && x.dim(3) + 2 * padding >= w.dim(3),
          "conv2d: kernel larger than padded input");
  kernels::ConvGeometry g{x.dim(0), x.dim(1), w.dim(0), x.dim(2), x.dim(3),
                          w.dim(2), w.dim(3), stride, padding};
  if (b.defined()) require(b.numel() == g.out_channels, "conv2d: bias " + shape_str(b.shape()));
  std::vector<T> out(g.batch * g.out_channels * g.out_h() * g.out_w());
  kp::conv2d_forward<T>(g, x.data(), w.data(), b.defined() ? b.data() : std::span<const T>{}, out);
  std::vector<NodeRef<T>> inputs{x.node(), w.node()};
  if (b.defined()) inputs.push_back(b.node());
  return make_result<T>("conv2d", {g.batch, g.out_channels, g.out_h(), g.out_w()}, std::move(out),
                        std::move(inputs), [g](Node<T>& self) {
                          auto& x = self.inputs[0];
                          auto& w = self.inputs[1];
                          if (wants(x))
                            kp::conv2d_backward_input<T>(g, self.grad, w->value, x->ensure_grad());
                          if (wants(w))
                            kp::conv2d_backward_weight<T>(g, x->value, self.grad, w->ensure_grad());
                          if (self.inputs.size() > 2 && wants(self.inputs[2]))
                            add_channel_bias_grad<T>(self.grad, g.batch, g.out_channels,
                                                     g.out_h() * g.out_w(),
                                                     self.inputs[2]->ensure_grad());
                        });
}

template <std::floating_point T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           std::size_t stride, std::size_t padding) {
  require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(0),
          "conv_transpose2d: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  require(stride >= 1, "conv_transpose2d: stride must be >= 1");
  const std::size_t kh = w.dim(2), kw = w.dim(3);
  const std::size_t full_h = (x.dim(2) - 1) * stride + kh, full_w = (x.dim(3) - 1) * stride + kw;
  require(full_h > 2 * padding && full_w > 2 * padding, "conv_transpose2d: padding too large");
  // The transposed convolution is the adjoint of a convolution whose input
  // is this op's output.
  kernels::ConvGeometry g{x.dim(0), w.dim(1), w.dim(0), full_h - 2 * padding, full_w - 2 * padding,
                          kh, kw, stride, padding};
  const std::size_t out_c = w.dim(1), oh = g.in_h, ow = g.in_w;
  if (b.defined()) require(b.numel() == out_c, "conv_transpose2d: bias " + shape_str(b.shape()));
  std::vector<T> out(g.batch * out_c * oh * ow, T(0));
  if (b.defined())
    for (std::size_t bi = 0; bi < g.batch; ++bi)
      for (std::size_t c = 0; c < out_c; ++c)
        std::fill_n(out.begin() + (bi * out_c + c) * oh * ow, oh * ow, b.data()[c]);
  kp::conv2d_backward_input<T>(g, x.data(), w.data(), out);
  std::vector<NodeRef<T>> inputs{x.node(), w.node()};
  if (b.defined()) inputs.push_back(b.node());
  return make_result<T>("conv_transpose2d", {g.batch, out_c, oh, ow}, std::move(out),
                        std::move(inputs), [g, out_c, oh, ow](Node<T>& self) {
                          auto& x = self.inputs[0];
                          auto& w = self.inputs[1];
                          if (wants(x)) {
                            std::vector<T> tmp(x->value.size());
                            kp::conv2d_forward<T>(g, self.grad, w->value, {}, tmp);
                            auto& gx = x->ensure_grad();
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += tmp[i];
                          }
                          if (wants(w))
                            kp::conv2d_backward_weight<T>(g, self.grad, x->value, w->ensure_grad());
                          if (self.inputs.size() > 2 && wants(self.inputs[2]))
                            add_channel_bias_grad<T>(self.grad, g.batch, out_c, oh * ow,
                                                     self.inputs[2]->ensure_grad());
                        });
}

template <std::floating_point T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices) {
  require(x.rank() >= 1, "gather_rows: scalar input");
  const std::size_t rows = x.dim(0), width = rows ? x.numel() / rows : 0;
  std::vector<T> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows)
      throw IndexError("gather_rows: index " + std::to_string(indices[r]) + " >= " +
                       std::to_string(rows));
    std::copy_n(x.data().begin() + indices[r] * width, width, out.begin() + r * width);
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result<T>("gather_rows", std::move(shape), std::move(out), {x.node()},
                        [width, idx = std::move(idx)](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::size_t j = 0; j < width; ++j)
                              g[idx[r] * width + j] += self.grad[r * width + j];
                        });
}

template <std::floating_point T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Shape shape = parts.front().shape();
  require(!shape.empty(), "concat_rows: scalar input");
  std::size_t rows = 0;
  std::vector<NodeRef<T>> inputs;
  for (const auto& p : parts) {
    require(p.rank() == shape.size() &&
                std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1),
            "concat_rows: trailing shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(shape));
    rows += p.dim(0);
    inputs.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(rows * (shape[0] ? shape_numel(shape) / shape[0] : 0));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  shape[0] = rows;
  return make_result<T>("concat_rows", std::move(shape), std::move(out), std::move(inputs),
                        [](Node<T>& self) {
                          std::size_t off = 0;
                          for (auto& in : self.inputs) {
                            const std::size_t n = in->value.size();
                            if (wants(in)) {
                              auto& g = in->ensure_grad();
                              for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
                            }
                            off += n;
                          }
                        });
}

template <std::floating_point T>
Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == b.rank() && a.rank() >= 1 &&
              std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin()),
          "concat_lastdim: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t ka = a.shape().back(), kb = b.shape().back();
  const std::size_t rows = (ka + kb) ? (a.numel() + b.numel()) / (ka + kb) : 0;
  std::vector<T> out(a.numel() + b.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().begin() + r * ka, ka, out.begin() + r * (ka + kb));
    std::copy_n(b.data().begin() + r * kb, kb, out.begin() + r * (ka + kb) + ka);
  }
  Shape shape = a.shape();
  shape.back() = ka + kb;
  return make_result<T>("concat_lastdim", std::move(shape), std::move(out), {a.node(), b.node()},
                        [rows, ka, kb](Node<T>& self) {
                          auto& a = self.inputs[0];
                          auto& b = self.inputs[1];
                          if (wants(a)) {
                            auto& g = a->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < ka; ++j)
                                g[r * ka + j] += self.grad[r * (ka + kb) + j];
                          }
                          if (wants(b)) {
                            auto& g = b->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < kb; ++j)
                                g[r * kb + j] += self.grad[r * (ka + kb) + ka + j];
                          }
                        });
}

template <std::floating_point T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, T eps) {
  const std::size_t k = last_dim(x.shape());
  const std::size_t rows = k ? x.numel() / k : 0;
  std::vector<T> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += x.data()[r * k + j] * x.data()[r * k + j];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x.data()[r * k + j] / norms[r];
  }
  return make_result<T>("l2_normalize", x.shape(), std::move(out), {x.node()},
                        [rows, k, eps, norms = std::move(norms)](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* y = self.value.data() + r * k;
                            const T* gy = self.grad.data() + r * k;
                            if (norms[r] <= eps) {
                              for (std::size_t j = 0; j < k; ++j) g[r * k + j] += gy[j] / eps;
                              continue;
                            }
                            T dot = 0;
                            for (std::size_t j = 0; j < k; ++j) dot += y[j] * gy[j];
                            for (std::size_t j = 0; j < k; ++j)
                              g[r * k + j] += (gy[j] - y[j] * dot) / norms[r];
                          }
                        });
}

template <std::floating_point T>
Tensor<T> mean_axis0(const Tensor<T>& x) {
  require(x.rank() >= 1 && x.dim(0) > 0, "mean_axis0: needs at least one row");
  const std::size_t rows = x.dim(0), width = x.numel() / rows;
  std::vector<T> out(width, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) out[j] += x.data()[r * width + j];
  const T inv = T(1) / static_cast<T>(rows);
  for (auto& v : out) v *= inv;
  Shape shape(x.shape().begin() + 1, x.shape().end());
  return make_result<T>("mean_axis0", std::move(shape), std::move(out), {x.node()},
                        [rows, width, inv](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < width; ++j)
                              g[r * width + j] += inv * self.grad[j];
                        });
}

template <std::floating_point T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    std::span<const std::uint8_t> mask, AttentionTrace<T>* trace) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: expects [B,N,d] operands");
  require(k.shape() == v.shape() && q.dim(0) == k.dim(0) && q.dim(2) == k.dim(2),
          "attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
              shape_str(v.shape()));
  require(heads >= 1 && q.dim(2) % heads == 0, "attention: width not divisible by heads");
  require(k.dim(1) > 0, "attention: no keys");
  kernels::AttentionGeometry g{q.dim(0), q.dim(1), k.dim(1), q.dim(2), heads};
  require(mask.empty() || mask.size() == g.batch * g.query_len * g.key_len,
          "attention: mask must be [B,Nq,Nk]");
  std::vector<T> probs(g.batch * heads * g.query_len * g.key_len);
  std::vector<T> out(q.numel());
  const std::size_t fallbacks = kp::attention_forward<T>(g, q.data(), k.data(), v.data(), mask, probs, out);
  if (trace) {
    trace->fallback_rows += fallbacks;
    if (trace->capture_probs) trace->probs = probs;
  }
  return make_result<T>(
      "attention", q.shape(), std::move(out), {q.node(), k.node(), v.node()},
      [g, probs = std::move(probs)](Node<T>& self) {
        auto& qn = self.inputs[0];
        auto& kn = self.inputs[1];
        auto& vn = self.inputs[2];
        const std::size_t d = g.width, dh = g.head_dim(), nq = g.query_len, nk = g.key_len;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        T* gq = wants(qn) ? qn->ensure_grad().data() : nullptr;
        T* gk = wants(kn) ? kn->ensure_grad().data() : nullptr;
        T* gv = wants(vn) ? vn->ensure_grad().data() : nullptr;
        const auto units = static_cast<std::ptrdiff_t>(g.batch * g.heads);
#pragma omp parallel for schedule(static) if (units > 1)
        for (std::ptrdiff_t unit = 0; unit < units; ++unit) {
          const std::size_t b = static_cast<std::size_t>(unit) / g.heads;
          const std::size_t h = static_cast<std::size_t>(unit) % g.heads;
          const T* p = probs.data() + static_cast<std::size_t>(unit) * nq * nk;
          const T* go = self.grad.data() + b * nq * d + h * dh;
          const std::size_t qoff = b * nq * d + h * dh, koff = b * nk * d + h * dh;
          if (gv) kp::gemm<T>(true, false, nk, dh, nq, T(1), p, nk, go, d, T(1), gv + koff, d);
          if (!gq && !gk) continue;
          std::vector<T> ds(nq * nk);
          kp::gemm<T>(false, true, nq, nk, dh, T(1), go, d, vn->value.data() + koff, d, T(0),
                      ds.data(), nk);
          for (std::size_t i = 0; i < nq; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < nk; ++j) dot += ds[i * nk + j] * p[i * nk + j];
            for (std::size_t j = 0; j < nk; ++j) ds[i * nk + j] = p[i * nk + j] * (ds[i * nk + j] - dot);
          }
          if (gq)
            kp::gemm<T>(false, false, nq, dh, nk, scale, ds.data(), nk, kn->value.data() + koff, d,
                        T(1), gq + qoff, d);
          if (gk)
            kp::gemm<T>(true, false, nk, dh, nq, scale, ds.data(), nk, qn->value.data() + qoff, d,
                        T(1), gk + koff, d);
        }
      });
}

#define SATLOC_INSTANTIATE(T)                                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&);                                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> transpose(const Tensor<T>&);                                                 \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                           \
  template Tensor<T> log_softmax_lastdim(const Tensor<T>&);                                       \
  template Tensor<T> cross_entropy_from_logits(const Tensor<T>&, std::size_t);                    \
  template Tensor<T> cross_entropy_rows(const Tensor<T>&, std::span<const std::int64_t>,          \
                                        std::span<const T>);                                      \
  template Tensor<T> soft_cross_entropy_rows(const Tensor<T>&, std::span<const T>,                \
                                             std::span<const T>);                                 \
  template Tensor<T> entropy(const Tensor<T>&);                                                   \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> gelu(const Tensor<T>&);                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,    \
                            std::size_t);                                                         \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                      std::size_t, std::size_t);                                  \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                 \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                  \
  template Tensor<T> concat_lastdim(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> l2_normalize_lastdim(const Tensor<T>&, T);                                   \
  template Tensor<T> mean_axis0(const Tensor<T>&);                                                \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                               std::span<const std::uint8_t>, AttentionTrace<T>*);
SATLOC_INSTANTIATE(float)
SATLOC_INSTANTIATE(double)
#undef SATLOC_INSTANTIATE

}  // namespace satloc::ops
