#include "satloc/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace satloc {

template <std::floating_point T>
OptimizerState<T> OptimizerState<T>::like(std::span<const Tensor<T>> params, double base_lr,
                                          double weight_decay) {
  OptimizerState s;
  s.base_lr = base_lr;
  s.weight_decay = weight_decay;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.numel(), T(0));
    s.second_moment.emplace_back(p.numel(), T(0));
  }
  return s;
}

template <std::floating_point T>
void adamw_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr,
                const AdamWConfig& cfg, std::span<const std::uint8_t> decay,
                std::span<const std::string> names) {
  if (state.first_moment.size() != params.size())
    throw DimensionError("adamw_step: optimizer state holds " +
                         std::to_string(state.first_moment.size()) + " tensors for " +
                         std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel())
      throw DimensionError("adamw_step: moment shape mismatch for parameter " + std::to_string(i));
    if (!params[i].has_grad()) continue;
    const auto g = params[i].grad();
    const auto bad = std::find_if(g.begin(), g.end(), [](T v) { return !std::isfinite(v); });
    if (bad != g.end())
      throw NumericError("adamw_step: non-finite gradient in parameter " +
                         (i < names.size() ? names[i] : std::to_string(i)) + " at element " +
                         std::to_string(bad - g.begin()) + " (step " +
                         std::to_string(state.step + 1) + ")");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const bool has = params[i].has_grad();
    const auto g = params[i].grad();
    const bool decayed = decay.empty() || decay[i];
    const double shrink = decayed ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = has ? static_cast<double>(g[j]) : 0.0;
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) * shrink - lr * update);
    }
  }
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr,
                 std::uint64_t warmup_steps) {
  step = std::min(step, total_steps);
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step<float>(std::span<Tensor<float>>, OptimizerState<float>&, double,
                                const AdamWConfig&, std::span<const std::uint8_t>,
                                std::span<const std::string>);
template void adamw_step<double>(std::span<Tensor<double>>, OptimizerState<double>&, double,
                                 const AdamWConfig&, std::span<const std::uint8_t>,
                                 std::span<const std::string>);

}  // namespace satloc
