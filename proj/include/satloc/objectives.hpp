#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "satloc/params.hpp"
#include "satloc/views.hpp"

namespace satloc {

/// Layernorm + linear classifier over reference grid positions.
template <std::floating_point T>
struct PositionHead {
  LayerNorm<T> norm;
  Linear<T> proj;  // d -> N_ref

  // Small init keeps initial logits near uniform.
  static PositionHead make(ParamStore<T>& store, const std::string& name, std::size_t width,
                           std::size_t num_ref_patches, Rng& rng);
  Tensor<T> logits(const Tensor<T>& u) const { return proj(norm(u)); }
  std::size_t num_classes() const { return proj.weight.dim(1); }
};

/// Per-row targets and weights for the position and cluster losses.
///
/// Row r is one query token; target -1 marks tokens outside Ω. Weights are
/// 1 / (|Ω_v| * V) so the loss is a mean over Ω within each view, then over
/// the V views. Views with empty Ω contribute nothing.
struct PositionTargets {
  std::vector<std::int64_t> target;
  std::vector<double> weight;
  std::vector<std::size_t> sample;  // reference sample of each row
  std::size_t num_views = 0;
  std::size_t omega = 0;            // rows with a target
};

// `views[v]` is the correspondence of view v, whose reference sample is
// v / views_per_sample; `token_positions` holds the query position id of every
// token, views back to back with `tokens_per_view` tokens each.
PositionTargets make_position_targets(std::span<const Correspondence> views, std::size_t views_per_sample,
                                      std::span<const std::int32_t> token_positions,
                                      std::size_t tokens_per_view);

template <std::floating_point T>
struct PositionResult {
  Tensor<T> loss;
  std::optional<double> acc_at_1;  // none when no row has a target
  std::size_t omega = 0;
  std::size_t correct = 0;
};

// logits [R, N_ref]. Loss = sum_r weight_r * CE(logits_r, target_r).
template <std::floating_point T>
PositionResult<T> position_loss(const Tensor<T>& logits, const PositionTargets& targets);

// Top-1 accuracy over rows with a non-negative target.
std::optional<double> accuracy_at_1(std::span<const double> logits, std::size_t classes,
                                    std::span<const std::int64_t> targets);

// Alternately rescales columns to sum R/K and rows to sum 1, `iterations`
// times, on a non-negative R x K matrix (row-major, double precision). The
// result always ends on the row step. Throws ContractError on negative input
// and NumericError on non-finite input.
std::vector<double> sinkhorn_knopp(std::span<const double> probs, std::size_t rows, std::size_t cols,
                                   std::size_t iterations = 3);

struct ClusterConfig {
  std::size_t prototypes = 256;
  std::size_t dim = 0;      // projected width; 0 = encoder width
  std::size_t hidden = 0;   // projector hidden width; 0 = 2 * encoder width
  double temperature = 0.05;
  std::size_t sinkhorn_iterations = 3;
  double entropy_weight = 1.0;
};

/// Projector MLP, unit-norm prototypes and temperature.
template <std::floating_point T>
class ClusterHead {
 public:
  static ClusterHead make(ParamStore<T>& store, const std::string& name, std::size_t width,
                          const ClusterConfig& cfg, Rng& rng);

  // L2-normalised projection of rows [R, d] -> [R, dim].
  Tensor<T> project(const Tensor<T>& z) const;
  // Prototype similarities over temperature, [R, K].
  Tensor<T> logits(const Tensor<T>& z) const;
  // Same values computed on detached copies; never part of a graph.
  std::vector<double> logits_detached(const Tensor<T>& z) const;
  void normalize_prototypes();

  const Tensor<T>& prototypes() const { return prototypes_; }
  const ClusterConfig& config() const { return cfg_; }

 private:
  ClusterConfig cfg_;
  Linear<T> fc1_, fc2_;
  Tensor<T> prototypes_;  // [K, dim]
};

/// Sinkhorn-balanced soft labels for the rows selected by `targets`.
struct PseudoLabels {
  std::vector<double> pre_sinkhorn;  // unique (sample, position) pairs x K
  std::vector<double> balanced;      // same shape
  std::vector<std::size_t> row_of;   // per target row: index into the unique pairs, or npos
  std::size_t unique_rows = 0;
  std::size_t classes = 0;
};

// Labels come from the reference tokens at each target position (averaged
// over every token carrying that position id), projected, softmaxed with the
// head's temperature and balanced with sinkhorn_knopp. z_ref is [B, L, d];
// `ref_positions` holds the position ids of its B*L tokens.
template <std::floating_point T>
PseudoLabels pseudo_labels(const Tensor<T>& z_ref, std::span<const std::int32_t> ref_positions,
                           const ClusterHead<T>& head, const PositionTargets& targets);

// sum_r weight_r * H(labels_r, softmax(logits_r)) over rows with a target.
// cluster_logits is [R, K] for every target row (rows without a target are
// ignored).
template <std::floating_point T>
Tensor<T> cluster_loss(const Tensor<T>& cluster_logits, const PseudoLabels& labels,
                       const PositionTargets& targets);

// Entropy of the mean of softmax(cluster_logits) over rows with a target.
template <std::floating_point T>
Tensor<T> mean_entropy_regularizer(const Tensor<T>& cluster_logits, const PositionTargets& targets);

template <std::floating_point T>
struct LossReport {
  Tensor<T> combined;
  double position_loss = 0.0;
  double cluster_loss = 0.0;
  double entropy_reg = 0.0;
  double combined_value = 0.0;
  std::optional<double> acc_at_1;
  std::size_t omega = 0;

  std::string to_log_fields() const;
};

// position + cluster - entropy_weight * entropy; cluster terms are omitted
// when `cluster` is undefined.
template <std::floating_point T>
LossReport<T> combined_loss(const PositionResult<T>& position, const Tensor<T>& cluster,
                            const Tensor<T>& entropy, double entropy_weight);

}  // namespace satloc
