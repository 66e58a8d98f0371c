#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "satloc/errors.hpp"
#include "satloc/ops.hpp"
#include "satloc/rng.hpp"
#include "satloc/tensor.hpp"

namespace satloc {

/// Ordered, named collection of trainable leaves.
template <std::floating_point T>
class ParamStore {
 public:
  Tensor<T> add(std::string name, Shape shape, std::vector<T> values) {
    for (const auto& n : names_)
      if (n == name) throw ContractError("ParamStore: duplicate parameter " + name);
    auto t = Tensor<T>::from(std::move(shape), std::move(values), true);
    names_.push_back(std::move(name));
    tensors_.push_back(t);
    return t;
  }
  Tensor<T> add_normal(std::string name, Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> nd(0.0, stddev);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(nd(rng));
    return add(std::move(name), std::move(shape), std::move(v));
  }
  Tensor<T> add_constant(std::string name, Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return add(std::move(name), std::move(shape), std::vector<T>(n, value));
  }

  const Tensor<T>& get(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return tensors_[i];
    throw ContractError("ParamStore: no parameter " + name);
  }
  std::size_t size() const { return tensors_.size(); }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  const std::vector<std::string>& names() const { return names_; }

  // Matrices and higher-rank weights decay; gains, biases and vectors do not.
  std::vector<std::uint8_t> decay_mask() const {
    std::vector<std::uint8_t> m;
    for (const auto& t : tensors_) m.push_back(t.rank() >= 2 ? 1 : 0);
    return m;
  }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
};

template <std::floating_point T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out] or undefined

  // Truncation-free normal init with std sqrt(2 / (in + out)) unless given.
  static Linear make(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                     Rng& rng, bool with_bias = true, double stddev = -1.0) {
    if (stddev < 0) stddev = std::sqrt(2.0 / static_cast<double>(in + out));
    Linear l;
    l.weight = store.add_normal(name + ".weight", {in, out}, stddev, rng);
    if (with_bias) l.bias = store.add_constant(name + ".bias", {out}, T(0));
    return l;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

template <std::floating_point T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNorm make(ParamStore<T>& store, const std::string& name, std::size_t d) {
    return {store.add_constant(name + ".gain", {d}, T(1)), store.add_constant(name + ".bias", {d}, T(0))};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layernorm(x, gain, bias); }
};

template <std::floating_point T>
struct Mlp {
  Linear<T> fc1, fc2;

  static Mlp make(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t hidden,
                  Rng& rng) {
    return {Linear<T>::make(store, name + ".fc1", d, hidden, rng),
            Linear<T>::make(store, name + ".fc2", hidden, d, rng)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(ops::gelu(fc1(x))); }
};

}  // namespace satloc
