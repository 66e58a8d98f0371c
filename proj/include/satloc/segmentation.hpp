#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "satloc/checkpoint.hpp"
#include "satloc/config.hpp"
#include "satloc/dataset.hpp"
#include "satloc/model.hpp"

namespace satloc {

/// Four transposed convolutions then a 1x1 convolution to class logits.
///
/// log2(P) layers have kernel 2 and stride 2; the remaining layers have
/// kernel 3, stride 1 and padding 1, so the output side is exactly P times
/// the token grid. Widths run d, d/2, d/4, d/8, d/8.
template <std::floating_point T>
struct LightDecoder {
  struct Layer {
    Tensor<T> weight;  // [Cin, Cout, k, k]
    Tensor<T> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;
  };
  std::vector<Layer> layers;
  Tensor<T> head_weight;  // [classes, d/8, 1, 1]
  Tensor<T> head_bias;

  static constexpr std::size_t kLayers = 4;

  // Throws ConfigError unless patch is a power of two up to 16, width is a
  // multiple of 8 and classes >= 2.
  static LightDecoder make(ParamStore<T>& store, const std::string& name, std::size_t width,
                           std::size_t patch, std::size_t classes, Rng& rng);

  // grid [B, d, h, w] -> logits [B, classes, h*P, w*P]
  Tensor<T> forward(const Tensor<T>& grid) const;
  std::size_t upsampling() const;
};

// Mean over the G tokens of each position: unsampled tokens [B, G*N, d] ->
// [B, d, rows, cols]. Throws ContractError for sampled input or a grid that
// does not match N.
template <std::floating_point T>
Tensor<T> tokens_to_grid(const GroupedTokens<T>& tokens, std::size_t rows, std::size_t cols);

// Mean pixel cross-entropy over labels != ignore_label; logits [B, C, H, W],
// labels B*H*W. A batch with no scored pixel yields an exact zero.
template <std::floating_point T>
Tensor<T> pixel_cross_entropy(const Tensor<T>& logits, std::span<const std::int8_t> labels,
                              int ignore_label = -1);

/// classes x classes counts, rows = truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);
  // Pixels whose truth equals ignore_label are skipped. Throws
  // DimensionError on size mismatch and IndexError on out-of-range labels.
  void add(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, int ignore_label = -1);
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * classes_ + pred]; }
  std::uint64_t total() const;
  std::size_t classes() const { return classes_; }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

struct IouReport {
  std::vector<std::optional<double>> iou;  // none when TP + FP + FN = 0
  std::optional<double> miou;              // mean over classes present in truth
  std::string to_log_lines(const std::string& prefix = "") const;
};

IouReport iou_miou(const ConfusionMatrix& cm);
IouReport iou_miou(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, std::size_t classes,
                   int ignore_label = -1);

/// Backbone (patch embedding, encodings, encoder) plus light decoder.
class SegmentationModel {
 public:
  // Model shape from `cfg` with the finetune.groups knobs.
  static SegmentationModel make(const RunConfig& cfg, std::span<const std::string> channel_tags,
                                std::uint64_t seed);
  // Rebuilds a finetuned model; every parameter must be present.
  static SegmentationModel from_checkpoint(const Checkpoint& ckpt, std::span<const std::string> channel_tags);

  // Copies matching backbone parameters from a pretraining checkpoint and
  // returns how many were copied.
  std::size_t load_backbone(const Checkpoint& pretrained);

  // Images must share the model's channel layout; result [B, classes, H, W].
  Tensor<float> logits(std::span<const RasterImage> images) const;
  std::vector<std::int32_t> predict(const RasterImage& image) const;

  std::vector<Tensor<float>>& trainable() { return trainable_; }
  const std::vector<std::string>& trainable_names() const { return names_; }
  std::vector<std::uint8_t> decay_mask() const;
  Checkpoint checkpoint() const;
  const RunConfig& config() const { return cfg_; }
  std::size_t classes() const { return cfg_.finetune.classes; }

 private:
  SegmentationModel(RunConfig cfg, PretrainModel<float> backbone);
  void collect();

  RunConfig cfg_;
  PretrainModel<float> backbone_;
  ParamStore<float> head_store_;
  LightDecoder<float> decoder_;
  std::vector<Tensor<float>> trainable_;
  std::vector<std::string> names_;
};

struct EvalResult {
  ConfusionMatrix confusion{2};
  IouReport report;
  std::string to_log_lines() const;
};

// Scores every sample; with `pgm_dir` writes one binary PGM of predicted
// class ids per sample.
EvalResult evaluate(const SegmentationModel& model, const Dataset& data, const std::filesystem::path& pgm_dir = {});

struct FinetuneResult {
  std::uint64_t seed = 0;
  std::vector<std::pair<std::uint64_t, double>> val_curve;  // (step, val mIoU)
  IouReport train;
  std::optional<IouReport> val;
  std::vector<double> losses;  // per step

  // First evaluated step whose validation mIoU reaches `threshold`.
  std::optional<std::uint64_t> steps_to_reach(double threshold) const;
};

// One run. `pretrained` (may be null) seeds the backbone. Throws ConfigError
// when the data lacks labels or the class count disagrees.
FinetuneResult finetune(const RunConfig& cfg, const Dataset& train, const Dataset* val, const Checkpoint* pretrained,
                        std::uint64_t seed, std::span<std::ostream* const> log_sinks = {},
                        SegmentationModel* trained = nullptr);

struct FinetuneSummary {
  std::vector<FinetuneResult> runs;
  double mean_train_miou = 0.0;
  std::optional<double> mean_val_miou;
  std::string to_log_line() const;
};

// finetune.runs runs with seeds run.seed + r; the last run's model is saved
// to out_dir/finetuned.slckpt when out_dir is set.
FinetuneSummary finetune_runs(const RunConfig& cfg, std::span<std::ostream* const> log_sinks,
                              const std::filesystem::path& out_dir = {});

}  // namespace satloc
