#include "satloc/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "satloc/errors.hpp"

namespace satloc {

template <std::floating_point T>
PositionHead<T> PositionHead<T>::make(ParamStore<T>& store, const std::string& name, std::size_t width,
                                      std::size_t num_ref_patches, Rng& rng) {
  return {LayerNorm<T>::make(store, name + ".norm", width),
          Linear<T>::make(store, name + ".proj", width, num_ref_patches, rng, true, 0.02)};
}

PositionTargets make_position_targets(std::span<const Correspondence> views, std::size_t views_per_sample,
                                      std::span<const std::int32_t> token_positions,
                                      std::size_t tokens_per_view) {
  if (views_per_sample == 0) throw ContractError("make_position_targets: views_per_sample must be >= 1");
  if (token_positions.size() != views.size() * tokens_per_view)
    throw ContractError("make_position_targets: " + std::to_string(token_positions.size()) +
                        " token ids for " + std::to_string(views.size()) + " views of " +
                        std::to_string(tokens_per_view));
  PositionTargets t;
  t.num_views = views.size();
  const std::size_t rows = token_positions.size();
  t.target.assign(rows, -1);
  t.weight.assign(rows, 0.0);
  t.sample.resize(rows);
  for (std::size_t v = 0; v < views.size(); ++v) {
    std::size_t valid = 0;
    for (std::size_t k = 0; k < tokens_per_view; ++k) {
      const std::size_t r = v * tokens_per_view + k;
      const auto p = static_cast<std::size_t>(token_positions[r]);
      if (p >= views[v].h.size()) throw IndexError("make_position_targets: position id out of range");
      t.target[r] = views[v].h[p];
      t.sample[r] = v / views_per_sample;
      valid += t.target[r] >= 0;
    }
    for (std::size_t k = 0; k < tokens_per_view && valid; ++k) {
      const std::size_t r = v * tokens_per_view + k;
      if (t.target[r] >= 0) t.weight[r] = 1.0 / (static_cast<double>(valid) * static_cast<double>(views.size()));
    }
    t.omega += valid;
  }
  return t;
}

std::optional<double> accuracy_at_1(std::span<const double> logits, std::size_t classes,
                                    std::span<const std::int64_t> targets) {
  std::size_t seen = 0, correct = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0) continue;
    const double* row = logits.data() + r * classes;
    const auto best = static_cast<std::int64_t>(std::max_element(row, row + classes) - row);
    ++seen;
    correct += best == targets[r];
  }
  if (seen == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(seen);
}

template <std::floating_point T>
PositionResult<T> position_loss(const Tensor<T>& logits, const PositionTargets& targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.target.size())
    throw DimensionError("position_loss: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(targets.target.size()) + " rows");
  const std::size_t K = logits.dim(1);
  for (auto t : targets.target)
    if (t >= static_cast<std::int64_t>(K)) throw IndexError("position_loss: target beyond head width");
  std::vector<T> w(targets.weight.begin(), targets.weight.end());
  PositionResult<T> res;
  res.loss = ops::cross_entropy_rows(logits, targets.target, std::span<const T>(w));
  res.omega = targets.omega;
  for (std::size_t r = 0; r < targets.target.size(); ++r) {
    if (targets.target[r] < 0) continue;
    const T* row = logits.data().data() + r * K;
    res.correct += static_cast<std::int64_t>(std::max_element(row, row + K) - row) == targets.target[r];
  }
  if (res.omega) res.acc_at_1 = static_cast<double>(res.correct) / static_cast<double>(res.omega);
  return res;
}

std::vector<double> sinkhorn_knopp(std::span<const double> probs, std::size_t rows, std::size_t cols,
                                   std::size_t iterations) {
  if (probs.size() != rows * cols) throw DimensionError("sinkhorn_knopp: size mismatch");
  for (double v : probs) {
    if (!std::isfinite(v)) throw NumericError("sinkhorn_knopp: non-finite entry");
    if (v < 0) throw ContractError("sinkhorn_knopp: entries must be >= 0");
  }
  std::vector<double> q(probs.begin(), probs.end());
  if (rows == 0 || cols == 0) return q;
  const double col_target = static_cast<double>(rows) / static_cast<double>(cols);
  std::vector<double> col_sum(cols);
  auto normalize_rows = [&] {
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < cols; ++k) s += q[r * cols + k];
      if (s > 0)
        for (std::size_t k = 0; k < cols; ++k) q[r * cols + k] /= s;
    }
  };
  for (std::size_t it = 0; it < iterations; ++it) {
    std::fill(col_sum.begin(), col_sum.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < cols; ++k) col_sum[k] += q[r * cols + k];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < cols; ++k)
        if (col_sum[k] > 0) q[r * cols + k] *= col_target / col_sum[k];
    normalize_rows();
  }
  if (iterations == 0) normalize_rows();
  return q;
}

template <std::floating_point T>
ClusterHead<T> ClusterHead<T>::make(ParamStore<T>& store, const std::string& name, std::size_t width,
                                    const ClusterConfig& cfg, Rng& rng) {
  if (cfg.prototypes == 0) throw ConfigError("cluster head needs at least one prototype");
  if (!(cfg.temperature > 0)) throw ConfigError("cluster temperature must be positive");
  ClusterHead h;
  h.cfg_ = cfg;
  if (h.cfg_.dim == 0) h.cfg_.dim = width;
  if (h.cfg_.hidden == 0) h.cfg_.hidden = 2 * width;
  h.fc1_ = Linear<T>::make(store, name + ".proj.fc1", width, h.cfg_.hidden, rng);
  h.fc2_ = Linear<T>::make(store, name + ".proj.fc2", h.cfg_.hidden, h.cfg_.dim, rng);
  h.prototypes_ = store.add_normal(name + ".prototypes", {cfg.prototypes, h.cfg_.dim}, 1.0, rng);
  h.normalize_prototypes();
  return h;
}

template <std::floating_point T>
Tensor<T> ClusterHead<T>::project(const Tensor<T>& z) const {
  return ops::l2_normalize_lastdim(fc2_(ops::gelu(fc1_(z))));
}

template <std::floating_point T>
Tensor<T> ClusterHead<T>::logits(const Tensor<T>& z) const {
  return ops::scale(ops::matmul(project(z), ops::transpose(prototypes_)), static_cast<T>(1.0 / cfg_.temperature));
}

template <std::floating_point T>
std::vector<double> ClusterHead<T>::logits_detached(const Tensor<T>& z) const {
  ClusterHead frozen = *this;
  frozen.fc1_ = {fc1_.weight.detach(), fc1_.bias.detach()};
  frozen.fc2_ = {fc2_.weight.detach(), fc2_.bias.detach()};
  frozen.prototypes_ = prototypes_.detach();
  const Tensor<T> out = frozen.logits(z.detach());
  return {out.data().begin(), out.data().end()};
}

template <std::floating_point T>
void ClusterHead<T>::normalize_prototypes() {
  const std::size_t k = prototypes_.dim(0), d = prototypes_.dim(1);
  auto data = prototypes_.mutable_data();
  for (std::size_t r = 0; r < k; ++r) {
    double n = 0;
    for (std::size_t c = 0; c < d; ++c) n += static_cast<double>(data[r * d + c]) * data[r * d + c];
    n = std::sqrt(n);
    if (n > 0)
      for (std::size_t c = 0; c < d; ++c) data[r * d + c] = static_cast<T>(data[r * d + c] / n);
  }
}

template <std::floating_point T>
PseudoLabels pseudo_labels(const Tensor<T>& z_ref, std::span<const std::int32_t> ref_positions,
                           const ClusterHead<T>& head, const PositionTargets& targets) {
  if (z_ref.rank() != 3 || ref_positions.size() != z_ref.dim(0) * z_ref.dim(1))
    throw ContractError("pseudo_labels: z_ref must be [B, L, d] with one position id per token");
  const std::size_t B = z_ref.dim(0), L = z_ref.dim(1), d = z_ref.dim(2);
  std::map<std::pair<std::size_t, std::int64_t>, std::size_t> unique;
  PseudoLabels out;
  out.row_of.assign(targets.target.size(), static_cast<std::size_t>(-1));
  for (std::size_t r = 0; r < targets.target.size(); ++r)
    if (targets.target[r] >= 0) unique.emplace(std::make_pair(targets.sample[r], targets.target[r]), 0);
  std::size_t next = 0;
  for (auto& [key, idx] : unique) idx = next++;
  for (std::size_t r = 0; r < targets.target.size(); ++r)
    if (targets.target[r] >= 0) out.row_of[r] = unique.at({targets.sample[r], targets.target[r]});

  // Mean reference representation per (sample, position).
  std::vector<double> acc(unique.size() * d, 0.0);
  std::vector<std::size_t> count(unique.size(), 0);
  const auto zd = z_ref.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      auto it = unique.find({b, ref_positions[b * L + t]});
      if (it == unique.end()) continue;
      for (std::size_t c = 0; c < d; ++c) acc[it->second * d + c] += zd[(b * L + t) * d + c];
      ++count[it->second];
    }
  std::vector<T> rows(acc.size());
  for (std::size_t u = 0; u < unique.size(); ++u) {
    if (count[u] == 0) throw ContractError("pseudo_labels: target position missing from the reference");
    for (std::size_t c = 0; c < d; ++c) rows[u * d + c] = static_cast<T>(acc[u * d + c] / static_cast<double>(count[u]));
  }
  out.unique_rows = unique.size();
  out.classes = head.prototypes().dim(0);
  if (out.unique_rows == 0) return out;

  std::vector<double> logits = head.logits_detached(Tensor<T>::from({out.unique_rows, d}, std::move(rows)));
  out.pre_sinkhorn.resize(logits.size());
  for (std::size_t u = 0; u < out.unique_rows; ++u) {
    const double* l = &logits[u * out.classes];
    double* p = &out.pre_sinkhorn[u * out.classes];
    const double mx = *std::max_element(l, l + out.classes);
    double s = 0;
    for (std::size_t k = 0; k < out.classes; ++k) s += (p[k] = std::exp(l[k] - mx));
    for (std::size_t k = 0; k < out.classes; ++k) p[k] /= s;
  }
  out.balanced = sinkhorn_knopp(out.pre_sinkhorn, out.unique_rows, out.classes, head.config().sinkhorn_iterations);
  return out;
}

template <std::floating_point T>
Tensor<T> cluster_loss(const Tensor<T>& cluster_logits, const PseudoLabels& labels,
                       const PositionTargets& targets) {
  const std::size_t R = targets.target.size(), K = labels.classes;
  if (cluster_logits.rank() != 2 || cluster_logits.dim(0) != R || cluster_logits.dim(1) != K)
    throw DimensionError("cluster_loss: logits " + shape_str(cluster_logits.shape()));
  std::vector<T> soft(R * K, T(0)), w(R, T(0));
  for (std::size_t r = 0; r < R; ++r) {
    if (targets.target[r] < 0) continue;
    const std::size_t u = labels.row_of.at(r);
    for (std::size_t k = 0; k < K; ++k) soft[r * K + k] = static_cast<T>(labels.balanced[u * K + k]);
    w[r] = static_cast<T>(targets.weight[r]);
  }
  return ops::soft_cross_entropy_rows(cluster_logits, std::span<const T>(soft), std::span<const T>(w));
}

template <std::floating_point T>
Tensor<T> mean_entropy_regularizer(const Tensor<T>& cluster_logits, const PositionTargets& targets) {
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < targets.target.size(); ++r)
    if (targets.target[r] >= 0) rows.push_back(r);
  if (rows.empty()) return Tensor<T>::scalar(T(0));
  return ops::entropy(ops::mean_axis0(ops::softmax_lastdim(ops::gather_rows(cluster_logits, rows))));
}

template <std::floating_point T>
std::string LossReport<T>::to_log_fields() const {
  std::ostringstream os;
  os.precision(9);
  os << "position_loss=" << position_loss << " cluster_loss=" << cluster_loss
     << " entropy_reg=" << entropy_reg << " combined=" << combined_value << " acc_at_1=";
  if (acc_at_1) os << *acc_at_1;
  else os << "none";
  os << " omega=" << omega;
  return os.str();
}

template <std::floating_point T>
LossReport<T> combined_loss(const PositionResult<T>& position, const Tensor<T>& cluster,
                            const Tensor<T>& entropy, double entropy_weight) {
  LossReport<T> rep;
  rep.position_loss = static_cast<double>(position.loss.item());
  rep.acc_at_1 = position.acc_at_1;
  rep.omega = position.omega;
  if (!cluster.defined()) {
    rep.combined = position.loss;
  } else {
    rep.cluster_loss = static_cast<double>(cluster.item());
    rep.entropy_reg = static_cast<double>(entropy.item());
    rep.combined = ops::sub(ops::add(position.loss, cluster), ops::scale(entropy, static_cast<T>(entropy_weight)));
  }
  rep.combined_value = static_cast<double>(rep.combined.item());
  return rep;
}

#define SATLOC_INSTANTIATE(T)                                                                          \
  template struct PositionHead<T>;                                                                     \
  template class ClusterHead<T>;                                                                       \
  template struct LossReport<T>;                                                                       \
  template PositionResult<T> position_loss(const Tensor<T>&, const PositionTargets&);                  \
  template PseudoLabels pseudo_labels(const Tensor<T>&, std::span<const std::int32_t>,                 \
                                      const ClusterHead<T>&, const PositionTargets&);                  \
  template Tensor<T> cluster_loss(const Tensor<T>&, const PseudoLabels&, const PositionTargets&);       \
  template Tensor<T> mean_entropy_regularizer(const Tensor<T>&, const PositionTargets&);               \
  template LossReport<T> combined_loss(const PositionResult<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                       double);
SATLOC_INSTANTIATE(float)
SATLOC_INSTANTIATE(double)
#undef SATLOC_INSTANTIATE

}  // namespace satloc
