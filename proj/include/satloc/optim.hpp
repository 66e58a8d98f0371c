#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "satloc/tensor.hpp"

namespace satloc {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

template <std::floating_point T>
struct OptimizerState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step = 0;
  double base_lr = 0.0;
  double weight_decay = 0.1;

  // Zero moments shaped like `params`.
  static OptimizerState like(std::span<const Tensor<T>> params, double base_lr, double weight_decay);
};

/// One AdamW update with decoupled weight decay. `decay[i]` selects whether
/// parameter i is decayed (empty = all). Parameters without a gradient are
/// treated as having a zero gradient. A non-finite gradient aborts the step
/// before any parameter changes and reports which parameter carried it.
template <std::floating_point T>
void adamw_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr,
                const AdamWConfig& cfg, std::span<const std::uint8_t> decay = {},
                std::span<const std::string> names = {});

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr,
                 std::uint64_t warmup_steps);

}  // namespace satloc
