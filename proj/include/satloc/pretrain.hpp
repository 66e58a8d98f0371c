#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "satloc/checkpoint.hpp"
#include "satloc/config.hpp"
#include "satloc/dataset.hpp"
#include "satloc/model.hpp"

namespace satloc {

/// One reference view and `views_per_sample` query views per sample.
struct PretrainBatch {
  std::size_t batch = 0;
  std::size_t views_per_sample = 0;
  std::vector<PatchArray> references;             // batch
  std::vector<PatchArray> queries;                // batch * views_per_sample, sample-major
  std::vector<Correspondence> correspondences;    // one per query
  std::vector<ViewSpec> reference_views;          // batch
  std::vector<ViewSpec> query_views;              // same layout as queries
  std::size_t ref_rows = 0, ref_cols = 0, query_rows = 0, query_cols = 0;
};

// View sampling for sample b of `step` draws from its own stream, so batches
// do not depend on thread count. With cfg.reference_noise the materialised
// reference views are replaced by standard-normal noise from a separate
// stream; queries and geometry are unchanged.
PretrainBatch prepare_batch(const Dataset& data, std::span<const std::size_t> indices, const RunConfig& cfg,
                            std::uint64_t step);

struct ForwardOptions {
  bool sample_groups = true;
  bool same_group_mask = false;
  double reference_mask_ratio = 0.8;
  bool cluster = true;
  double entropy_weight = 1.0;

  static ForwardOptions from(const RunConfig& cfg);
};

template <std::floating_point T>
struct ForwardTrace {
  EncodeTrace<T> query;
  EncodeTrace<T> reference;
  ops::AttentionTrace<T> cross;
  std::size_t query_length = 0;      // tokens per query sequence entering the encoder
  std::size_t reference_length = 0;  // same for the reference
  bool cross_attended = false;
  bool reference_encoded = false;
};

// Full pretraining objective for one batch. `rng` drives group sampling and
// reference masking.
template <std::floating_point T>
LossReport<T> pretrain_forward(const PretrainModel<T>& model, const PretrainBatch& batch, const ForwardOptions& opts,
                               Rng& rng, ForwardTrace<T>* trace = nullptr);

struct StepRecord {
  std::uint64_t step = 0;  // 1-based index of the finished step
  std::uint64_t epoch = 0;
  double lr = 0.0;
  LossReport<float> report;
  std::string line;  // key=value log line
};

/// Pretraining loop state: model, optimizer and schedule position.
class Pretrainer {
 public:
  // Throws ConfigError when the dataset cannot feed one batch.
  Pretrainer(RunConfig cfg, std::shared_ptr<const Dataset> data);

  std::uint64_t steps_per_epoch() const { return steps_per_epoch_; }
  std::uint64_t total_steps() const { return total_steps_; }
  std::uint64_t step() const { return optim_.step; }

  // One optimizer step. A non-finite loss throws NumericError before any
  // parameter changes.
  StepRecord train_step();

  // Trains until `total_steps()` or until `max_steps` more steps have run
  // (0 = no limit). Each log line goes to every sink; with a checkpoint path
  // the state is saved at every epoch boundary and when the run stops.
  void run(std::span<std::ostream* const> log_sinks, const std::filesystem::path& checkpoint_path = {},
           std::uint64_t max_steps = 0);

  Checkpoint checkpoint() const;
  // Requires an exact parameter match; mismatched config hashes only warn.
  void restore(const Checkpoint& ckpt);
  const std::vector<std::string>& warnings() const { return warnings_; }

  const RunConfig& config() const { return cfg_; }
  PretrainModel<float>& model() { return model_; }
  const PretrainModel<float>& model() const { return model_; }

 private:
  RunConfig cfg_;
  std::shared_ptr<const Dataset> data_;
  PretrainModel<float> model_;
  OptimizerState<float> optim_;
  std::vector<std::uint8_t> decay_;
  std::uint64_t steps_per_epoch_ = 0;
  std::uint64_t total_steps_ = 0;
  std::vector<std::string> warnings_;
};

}  // namespace satloc
