#include "satloc/pretrain.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <iostream>
#include <sstream>

#include "satloc/errors.hpp"

namespace satloc {

namespace {

constexpr std::uint64_t kViewStream = 0xb1e5;
constexpr std::uint64_t kNoiseStream = 0x401e;
constexpr std::uint64_t kForwardStream = 0x6f0d;

}  // namespace

PretrainBatch prepare_batch(const Dataset& data, std::span<const std::size_t> indices, const RunConfig& cfg,
                            std::uint64_t step) {
  const auto& vc = cfg.views;
  PretrainBatch out;
  out.batch = indices.size();
  out.views_per_sample = vc.num_queries;
  out.references.resize(out.batch);
  out.queries.resize(out.batch * vc.num_queries);
  out.correspondences.resize(out.batch * vc.num_queries);
  out.reference_views.resize(out.batch);
  out.query_views.resize(out.batch * vc.num_queries);
  out.ref_rows = out.ref_cols = vc.ref_size / vc.patch;
  out.query_rows = out.query_cols = vc.query_size / vc.patch;

  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t b = 0; b < out.batch; ++b) {
    try {
      Rng rng = derive_rng(cfg.seed, {kViewStream, step, b});
      const RasterImage img = data.sample(indices[b]);
      const ViewSpec ref = sample_reference_view(img, vc, rng);
      const auto queries = sample_query_views(img, ref, vc, vc.num_queries, rng);
      RasterImage ref_img = materialize_view(img, ref);
      if (cfg.reference_noise) {
        Rng noise = derive_rng(cfg.seed, {kNoiseStream, step, b});
        std::normal_distribution<float> nd(0.0f, 1.0f);
        for (auto& v : ref_img.data) v = nd(noise);
      }
      out.references[b] = patchify(ref_img, vc.patch);
      out.reference_views[b] = ref;
      for (std::size_t q = 0; q < queries.size(); ++q) {
        out.queries[b * vc.num_queries + q] = patchify(materialize_view(img, queries[q]), vc.patch);
        out.correspondences[b * vc.num_queries + q] = compute_correspondence(queries[q], ref);
        out.query_views[b * vc.num_queries + q] = queries[q];
      }
    } catch (...) {
#pragma omp critical(satloc_prepare_batch)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

ForwardOptions ForwardOptions::from(const RunConfig& cfg) {
  ForwardOptions o;
  o.sample_groups = cfg.groups.sampling;
  o.same_group_mask = cfg.same_group_mask;
  o.reference_mask_ratio = cfg.reference_mask_ratio;
  o.cluster = cfg.cluster_enabled;
  o.entropy_weight = cfg.cluster.entropy_weight;
  return o;
}

template <std::floating_point T>
LossReport<T> pretrain_forward(const PretrainModel<T>& model, const PretrainBatch& batch, const ForwardOptions& opts,
                               Rng& rng, ForwardTrace<T>* trace) {
  if (batch.batch == 0) throw ContractError("pretrain_forward: empty batch");
  const MaskMode mode = opts.same_group_mask ? MaskMode::kSameGroupExclusion : MaskMode::kNone;
  const bool bypass = opts.reference_mask_ratio >= 1.0;
  const std::size_t d = model.shape().encoder.width;

  GroupedTokens<T> q = model.tokens(batch.queries, batch.query_rows, batch.query_cols);
  if (opts.sample_groups) q = sample_groups(q, rng);
  if (trace) trace->query_length = q.length;
  const Tensor<T> z_q = model.encoder().encode(q, mode, trace ? &trace->query : nullptr);

  // At eta = 1 without the cluster loss nothing reads the reference.
  const bool need_ref = !bypass || opts.cluster;
  GroupedTokens<T> r;
  Tensor<T> z_ref;
  if (need_ref) {
    r = model.tokens(batch.references, batch.ref_rows, batch.ref_cols);
    if (opts.sample_groups) r = sample_groups(r, rng);
    z_ref = model.encoder().encode(r, mode, trace ? &trace->reference : nullptr);
    if (trace) {
      trace->reference_length = r.length;
      trace->reference_encoded = true;
    }
  }

  Tensor<T> u = z_q;
  if (!bypass) {
    const auto visible = mask_reference(z_ref, r.group_ids, r.position_ids, opts.reference_mask_ratio, rng);
    u = model.cross().forward(z_q, q.group_ids, visible, opts.same_group_mask, trace ? &trace->cross : nullptr);
    if (trace) trace->cross_attended = true;
  }

  const std::size_t rows = q.batch * q.length;
  const PositionTargets targets =
      make_position_targets(batch.correspondences, batch.views_per_sample, q.position_ids, q.length);
  const auto position = position_loss(model.position_head().logits(ops::reshape(u, {rows, d})), targets);

  Tensor<T> cluster, entropy;
  if (opts.cluster) {
    const PseudoLabels labels = pseudo_labels(z_ref, r.position_ids, model.cluster_head(), targets);
    const Tensor<T> logits = model.cluster_head().logits(ops::reshape(z_q, {rows, d}));
    cluster = cluster_loss(logits, labels, targets);
    entropy = mean_entropy_regularizer(logits, targets);
  }
  return combined_loss(position, cluster, entropy, opts.entropy_weight);
}

template LossReport<float> pretrain_forward(const PretrainModel<float>&, const PretrainBatch&, const ForwardOptions&,
                                            Rng&, ForwardTrace<float>*);
template LossReport<double> pretrain_forward(const PretrainModel<double>&, const PretrainBatch&,
                                             const ForwardOptions&, Rng&, ForwardTrace<double>*);

namespace {

PretrainModel<float> build_model(const RunConfig& cfg, const Dataset& data) {
  return PretrainModel<float>::make(model_shape(cfg, data.header().tags), cfg.seed);
}

std::string format_line(const StepRecord& r) {
  char head[96];
  std::snprintf(head, sizeof head, "step=%llu epoch=%llu lr=%.9g ", static_cast<unsigned long long>(r.step),
                static_cast<unsigned long long>(r.epoch), r.lr);
  return head + r.report.to_log_fields();
}

}  // namespace

Pretrainer::Pretrainer(RunConfig cfg, std::shared_ptr<const Dataset> data)
    : cfg_(std::move(cfg)), data_(std::move(data)), model_(build_model(cfg_, *data_)) {
  cfg_.validate();
  data_->require_trainable(cfg_.optim.batch_size);
  steps_per_epoch_ = data_->size() / cfg_.optim.batch_size;
  total_steps_ = cfg_.optim.steps ? cfg_.optim.steps : cfg_.optim.epochs * steps_per_epoch_;
  optim_ = OptimizerState<float>::like(model_.params().tensors(), cfg_.optim.lr, cfg_.optim.weight_decay);
  decay_ = model_.params().decay_mask();
  model_.cluster_head().normalize_prototypes();
}

StepRecord Pretrainer::train_step() {
  const std::uint64_t s = optim_.step;
  const std::uint64_t epoch = s / steps_per_epoch_;
  const std::uint64_t within = s % steps_per_epoch_;
  const auto order = data_->epoch_order(cfg_.seed, epoch);
  const std::size_t B = cfg_.optim.batch_size;
  const std::span<const std::size_t> idx(order.data() + within * B, B);

  const PretrainBatch batch = prepare_batch(*data_, idx, cfg_, s);
  Rng rng = derive_rng(cfg_.seed, {kForwardStream, s});
  model_.params().zero_grad();
  LossReport<float> rep = pretrain_forward(model_, batch, ForwardOptions::from(cfg_), rng);
  if (!std::isfinite(rep.combined_value))
    throw NumericError("non-finite loss at step " + std::to_string(s + 1) + ": " + rep.to_log_fields());
  backward(rep.combined);

  StepRecord rec;
  rec.lr = cosine_lr(s, total_steps_, cfg_.optim.lr, cfg_.optim.warmup_for(total_steps_));
  AdamWConfig ac{cfg_.optim.beta1, cfg_.optim.beta2, cfg_.optim.eps, cfg_.optim.weight_decay};
  adamw_step(std::span<Tensor<float>>(model_.params().tensors()), optim_, rec.lr, ac, decay_,
             model_.params().names());
  model_.cluster_head().normalize_prototypes();

  rec.step = optim_.step;
  rec.epoch = epoch;
  rec.report = std::move(rep);
  rec.report.combined = {};  // drop the graph
  rec.line = format_line(rec);
  return rec;
}

void Pretrainer::run(std::span<std::ostream* const> log_sinks, const std::filesystem::path& checkpoint_path,
                     std::uint64_t max_steps) {
  std::uint64_t done = 0;
  while (optim_.step < total_steps_ && (max_steps == 0 || done < max_steps)) {
    const StepRecord rec = train_step();
    ++done;
    for (auto* sink : log_sinks) *sink << rec.line << '\n' << std::flush;
    const bool last = rec.step == total_steps_ || done == max_steps;
    if (!checkpoint_path.empty() && (rec.step % steps_per_epoch_ == 0 || last))
      save_checkpoint(checkpoint_path, checkpoint());
  }
}

Checkpoint Pretrainer::checkpoint() const {
  Checkpoint c = capture_checkpoint(model_.params(), &optim_);
  c.config_text = cfg_.to_text();
  c.config_hash = cfg_.model_hash();
  return c;
}

void Pretrainer::restore(const Checkpoint& ckpt) {
  if (auto w = hash_mismatch(ckpt, cfg_.model_hash())) {
    warnings_.push_back(*w);
    std::cerr << "warning: " << *w << '\n';
  }
  restore_parameters(model_.params(), ckpt, true);
  restore_optimizer(optim_, ckpt);
}

}  // namespace satloc
