#include "satloc/segmentation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "satloc/errors.hpp"
#include "satloc/optim.hpp"

namespace satloc {

template <std::floating_point T>
LightDecoder<T> LightDecoder<T>::make(ParamStore<T>& store, const std::string& name, std::size_t width,
                                      std::size_t patch, std::size_t classes, Rng& rng) {
  if (!std::has_single_bit(patch) || patch > (std::size_t{1} << kLayers))
    throw ConfigError("LightDecoder: patch " + std::to_string(patch) + " is not a power of two up to 16");
  if (width % 8 || width == 0) throw ConfigError("LightDecoder: width must be a positive multiple of 8");
  if (classes < 2) throw ConfigError("LightDecoder: need at least 2 classes");
  const std::size_t upsampling_layers = static_cast<std::size_t>(std::countr_zero(patch));
  const std::size_t widths[kLayers + 1] = {width, width / 2, width / 4, width / 8, width / 8};
  LightDecoder d;
  for (std::size_t l = 0; l < kLayers; ++l) {
    Layer layer;
    const bool up = l < upsampling_layers;
    const std::size_t k = up ? 2 : 3;
    layer.stride = up ? 2 : 1;
    layer.padding = up ? 0 : 1;
    // Each output pixel sums Cin * (k / stride)^2 products.
    const double fan = static_cast<double>(widths[l] * (k / layer.stride) * (k / layer.stride));
    const std::string base = name + ".up" + std::to_string(l);
    layer.weight = store.add_normal(base + ".weight", {widths[l], widths[l + 1], k, k}, std::sqrt(2.0 / fan), rng);
    layer.bias = store.add_constant(base + ".bias", {widths[l + 1]}, T(0));
    d.layers.push_back(layer);
  }
  d.head_weight = store.add_normal(name + ".head.weight", {classes, widths[kLayers], 1, 1},
                                   std::sqrt(1.0 / static_cast<double>(widths[kLayers])), rng);
  d.head_bias = store.add_constant(name + ".head.bias", {classes}, T(0));
  return d;
}

template <std::floating_point T>
Tensor<T> LightDecoder<T>::forward(const Tensor<T>& grid) const {
  if (grid.rank() != 4 || grid.dim(1) != layers.front().weight.dim(0))
    throw ContractError("LightDecoder: expected grid [B, " + std::to_string(layers.front().weight.dim(0)) +
                        ", h, w], got " + shape_str(grid.shape()));
  Tensor<T> x = grid;
  for (const auto& l : layers) x = ops::gelu(ops::conv_transpose2d(x, l.weight, l.bias, l.stride, l.padding));
  return ops::conv2d(x, head_weight, head_bias, 1, 0);
}

template <std::floating_point T>
std::size_t LightDecoder<T>::upsampling() const {
  std::size_t f = 1;
  for (const auto& l : layers) f *= l.stride;
  return f;
}

template <std::floating_point T>
Tensor<T> tokens_to_grid(const GroupedTokens<T>& tokens, std::size_t rows, std::size_t cols) {
  if (tokens.sampled) throw ContractError("tokens_to_grid: decoder input must keep every group");
  const std::size_t B = tokens.batch, G = tokens.num_groups, N = tokens.num_positions, d = tokens.width();
  if (N != rows * cols || G * N != tokens.length)
    throw ContractError("tokens_to_grid: " + std::to_string(tokens.length) + " tokens do not tile a " +
                        std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  std::vector<std::size_t> idx;
  idx.reserve(B * G * N * d);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t i = 0; i < N; ++i) idx.push_back(((b * G + g) * N + i) * d + c);
  const Tensor<T> flat = ops::reshape(tokens.tokens, {B * G * N * d, 1});
  const Tensor<T> by_group = ops::reshape(ops::gather_rows(flat, idx), {G, B * d * N});
  return ops::reshape(ops::mean_axis0(by_group), {B, d, rows, cols});
}

template <std::floating_point T>
Tensor<T> pixel_cross_entropy(const Tensor<T>& logits, std::span<const std::int8_t> labels, int ignore_label) {
  if (logits.rank() != 4) throw DimensionError("pixel_cross_entropy: logits must be [B, C, H, W]");
  const std::size_t B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  if (labels.size() != B * HW)
    throw DimensionError("pixel_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(B * HW) + " pixels");
  std::vector<std::size_t> idx;
  idx.reserve(B * HW * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t c = 0; c < C; ++c) idx.push_back((b * C + c) * HW + p);
  const Tensor<T> rows =
      ops::reshape(ops::gather_rows(ops::reshape(logits, {B * C * HW, 1}), idx), {B * HW, C});
  std::vector<std::int64_t> target(B * HW);
  std::size_t scored = 0;
  for (std::size_t r = 0; r < target.size(); ++r) {
    const int l = labels[r];
    if (l == ignore_label) {
      target[r] = -1;
      continue;
    }
    if (l < 0 || static_cast<std::size_t>(l) >= C)
      throw IndexError("pixel_cross_entropy: label " + std::to_string(l) + " outside " + std::to_string(C) + " classes");
    target[r] = l;
    ++scored;
  }
  std::vector<T> weight(target.size(), scored ? T(1) / static_cast<T>(scored) : T(0));
  return ops::cross_entropy_rows(rows, target, std::span<const T>(weight));
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

void ConfusionMatrix::add(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, int ignore_label) {
  if (pred.size() != truth.size())
    throw DimensionError("ConfusionMatrix: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(truth.size()) + " labels");
  const auto k = static_cast<std::int32_t>(classes_);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] == ignore_label) continue;
    if (truth[i] < 0 || truth[i] >= k || pred[i] < 0 || pred[i] >= k)
      throw IndexError("ConfusionMatrix: label outside [0, " + std::to_string(classes_) + ")");
    ++counts_[static_cast<std::size_t>(truth[i]) * classes_ + static_cast<std::size_t>(pred[i])];
  }
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

IouReport iou_miou(const ConfusionMatrix& cm) {
  const std::size_t K = cm.classes();
  IouReport r;
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < K; ++c) {
    std::uint64_t tp = cm.at(c, c), fn = 0, fp = 0;
    for (std::size_t o = 0; o < K; ++o) {
      if (o == c) continue;
      fn += cm.at(c, o);
      fp += cm.at(o, c);
    }
    const std::uint64_t denom = tp + fp + fn;
    r.iou.push_back(denom ? std::optional<double>(static_cast<double>(tp) / static_cast<double>(denom)) : std::nullopt);
    if (tp + fn > 0) {
      sum += *r.iou.back();
      ++present;
    }
  }
  if (present) r.miou = sum / static_cast<double>(present);
  return r;
}

IouReport iou_miou(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, std::size_t classes,
                   int ignore_label) {
  ConfusionMatrix cm(classes);
  cm.add(pred, truth, ignore_label);
  return iou_miou(cm);
}

namespace {

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "none";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

}  // namespace

std::string IouReport::to_log_lines(const std::string& prefix) const {
  std::ostringstream os;
  for (std::size_t c = 0; c < iou.size(); ++c) os << prefix << "iou_" << c << '=' << fmt_opt(iou[c]) << '\n';
  os << prefix << "miou=" << fmt_opt(miou) << '\n';
  return os.str();
}

// Segmentation model ---------------------------------------------------------

namespace {

bool is_backbone(const std::string& name) {
  return name.starts_with("embed.") || name.starts_with("encoding.") || name.starts_with("encoder.");
}

}  // namespace

SegmentationModel::SegmentationModel(RunConfig cfg, PretrainModel<float> backbone)
    : cfg_(std::move(cfg)), backbone_(std::move(backbone)) {}

SegmentationModel SegmentationModel::make(const RunConfig& cfg, std::span<const std::string> channel_tags,
                                          std::uint64_t seed) {
  SegmentationModel m(cfg, PretrainModel<float>::make(model_shape(cfg, channel_tags, true), seed));
  Rng rng = derive_rng(seed, {0xdec0});
  m.decoder_ = LightDecoder<float>::make(m.head_store_, "decoder", cfg.encoder.width, cfg.views.patch,
                                         cfg.finetune.classes, rng);
  m.collect();
  return m;
}

void SegmentationModel::collect() {
  trainable_.clear();
  names_.clear();
  const auto& bp = backbone_.params();
  for (std::size_t i = 0; i < bp.size(); ++i)
    if (is_backbone(bp.names()[i])) {
      trainable_.push_back(bp.tensors()[i]);
      names_.push_back(bp.names()[i]);
    }
  for (std::size_t i = 0; i < head_store_.size(); ++i) {
    trainable_.push_back(head_store_.tensors()[i]);
    names_.push_back(head_store_.names()[i]);
  }
}

std::size_t SegmentationModel::load_backbone(const Checkpoint& pretrained) {
  std::size_t copied = 0;
  for (std::size_t i = 0; i < trainable_.size(); ++i) {
    if (!is_backbone(names_[i])) continue;
    auto it = std::find(pretrained.names.begin(), pretrained.names.end(), names_[i]);
    if (it == pretrained.names.end()) continue;
    const std::size_t j = static_cast<std::size_t>(it - pretrained.names.begin());
    if (pretrained.shapes[j] != trainable_[i].shape()) continue;
    std::copy(pretrained.values[j].begin(), pretrained.values[j].end(), trainable_[i].mutable_data().begin());
    ++copied;
  }
  return copied;
}

SegmentationModel SegmentationModel::from_checkpoint(const Checkpoint& ckpt, std::span<const std::string> channel_tags) {
  const RunConfig cfg = RunConfig::parse(ckpt.config_text, "checkpoint config");
  SegmentationModel m = make(cfg, channel_tags, cfg.seed);
  for (std::size_t i = 0; i < m.trainable_.size(); ++i) {
    auto it = std::find(ckpt.names.begin(), ckpt.names.end(), m.names_[i]);
    const std::size_t j = static_cast<std::size_t>(it - ckpt.names.begin());
    if (it == ckpt.names.end() || ckpt.shapes[j] != m.trainable_[i].shape())
      throw FormatError("finetuned checkpoint lacks a matching parameter " + m.names_[i]);
    std::copy(ckpt.values[j].begin(), ckpt.values[j].end(), m.trainable_[i].mutable_data().begin());
  }
  return m;
}

Tensor<float> SegmentationModel::logits(std::span<const RasterImage> images) const {
  if (images.empty()) throw ContractError("SegmentationModel: no images");
  const std::size_t P = cfg_.views.patch;
  const std::size_t H = images.front().height, W = images.front().width;
  if (H % P || W % P)
    throw ContractError("SegmentationModel: image " + std::to_string(H) + "x" + std::to_string(W) +
                        " is not a multiple of patch " + std::to_string(P));
  std::vector<PatchArray> patches;
  for (const auto& img : images) {
    if (img.height != H || img.width != W) throw ContractError("SegmentationModel: images differ in size");
    patches.push_back(patchify(img, P));
  }
  const GroupedTokens<float> tok = backbone_.tokens(patches, H / P, W / P);
  const MaskMode mode = cfg_.finetune.same_group_mask ? MaskMode::kSameGroupExclusion : MaskMode::kNone;
  GroupedTokens<float> z = tok;
  z.tokens = backbone_.encoder().encode(tok, mode);
  return decoder_.forward(tokens_to_grid(z, H / P, W / P));
}

std::vector<std::int32_t> SegmentationModel::predict(const RasterImage& image) const {
  const Tensor<float> out = logits(std::span<const RasterImage>(&image, 1));
  const std::size_t C = out.dim(1), HW = out.dim(2) * out.dim(3);
  const auto v = out.data();
  std::vector<std::int32_t> pred(HW, 0);
  for (std::size_t p = 0; p < HW; ++p)
    for (std::size_t c = 1; c < C; ++c)
      if (v[c * HW + p] > v[static_cast<std::size_t>(pred[p]) * HW + p]) pred[p] = static_cast<std::int32_t>(c);
  return pred;
}

std::vector<std::uint8_t> SegmentationModel::decay_mask() const {
  std::vector<std::uint8_t> m;
  for (const auto& t : trainable_) m.push_back(t.rank() >= 2 ? 1 : 0);
  return m;
}

Checkpoint SegmentationModel::checkpoint() const {
  Checkpoint c;
  c.config_text = cfg_.to_text();
  c.config_hash = cfg_.model_hash();
  for (std::size_t i = 0; i < trainable_.size(); ++i) {
    c.names.push_back(names_[i]);
    c.shapes.push_back(trainable_[i].shape());
    c.values.emplace_back(trainable_[i].data().begin(), trainable_[i].data().end());
  }
  return c;
}

// Evaluation -------------------------------------------------------------------

std::string EvalResult::to_log_lines() const {
  return "scored_pixels=" + std::to_string(confusion.total()) + "\n" + report.to_log_lines();
}

namespace {

std::vector<std::int32_t> widen(std::span<const std::int8_t> v) { return {v.begin(), v.end()}; }

void write_pgm(const std::filesystem::path& path, const std::vector<std::int32_t>& pred, std::size_t h,
               std::size_t w, std::size_t classes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  const int step = static_cast<int>(255 / (classes - 1));
  for (auto p : pred) out.put(static_cast<char>(static_cast<unsigned char>(p * step)));
}

}  // namespace

EvalResult evaluate(const SegmentationModel& model, const Dataset& data, const std::filesystem::path& pgm_dir) {
  if (!data.labeled()) throw ConfigError("evaluate: dataset has no labels");
  if (data.header().num_classes != model.classes())
    throw ConfigError("evaluate: dataset has " + std::to_string(data.header().num_classes) +
                      " classes, model predicts " + std::to_string(model.classes()));
  if (!pgm_dir.empty()) std::filesystem::create_directories(pgm_dir);
  EvalResult r;
  r.confusion = ConfusionMatrix(model.classes());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const RasterImage img = data.sample(i);
    const auto pred = model.predict(img);
    r.confusion.add(pred, widen(data.labels(i)));
    if (!pgm_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "pred_%05zu.pgm", i);
      write_pgm(pgm_dir / name, pred, img.height, img.width, model.classes());
    }
  }
  r.report = iou_miou(r.confusion);
  return r;
}

// Finetuning -------------------------------------------------------------------

std::optional<std::uint64_t> FinetuneResult::steps_to_reach(double threshold) const {
  for (const auto& [step, miou] : val_curve)
    if (miou >= threshold) return step;
  return std::nullopt;
}

namespace {

void check_labeled(const Dataset& data, const RunConfig& cfg, const char* what) {
  if (!data.labeled()) throw ConfigError(std::string(what) + " dataset has no labels");
  if (data.header().num_classes != cfg.finetune.classes)
    throw ConfigError(std::string(what) + " dataset has " + std::to_string(data.header().num_classes) +
                      " classes, finetune.classes is " + std::to_string(cfg.finetune.classes));
}

// Model-shaping knobs come from the pretraining run when there is one.
RunConfig shape_config(const RunConfig& cfg, const Checkpoint* pretrained) {
  if (!pretrained) return cfg;
  RunConfig shaped = RunConfig::parse(pretrained->config_text, "pretrained checkpoint config");
  shaped.finetune = cfg.finetune;
  shaped.seed = cfg.seed;
  return shaped;
}

}  // namespace

FinetuneResult finetune(const RunConfig& cfg, const Dataset& train, const Dataset* val, const Checkpoint* pretrained,
                        std::uint64_t seed, std::span<std::ostream* const> log_sinks, SegmentationModel* trained) {
  const auto& fo = cfg.finetune;
  check_labeled(train, cfg, "training");
  if (val) check_labeled(*val, cfg, "validation");
  train.require_trainable(fo.batch_size);

  const RunConfig shaped = shape_config(cfg, pretrained);
  SegmentationModel model = SegmentationModel::make(shaped, train.header().tags, seed);
  if (pretrained) {
    const std::size_t copied = model.load_backbone(*pretrained);
    if (copied == 0) throw ConfigError("pretrained checkpoint shares no backbone parameter with the finetune model");
  }
  auto& params = model.trainable();
  OptimizerState<float> optim = OptimizerState<float>::like(params, fo.lr, fo.weight_decay);
  const auto decay = model.decay_mask();
  const AdamWConfig ac{cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps, fo.weight_decay};
  const std::size_t spe = train.size() / fo.batch_size;

  FinetuneResult res;
  res.seed = seed;
  for (std::uint64_t s = 0; s < fo.steps; ++s) {
    const auto order = train.epoch_order(seed, s / spe);
    std::vector<RasterImage> images;
    std::vector<std::int8_t> labels;
    for (std::size_t k = 0; k < fo.batch_size; ++k) {
      const std::size_t i = order[(s % spe) * fo.batch_size + k];
      images.push_back(train.sample(i));
      const auto l = train.labels(i);
      labels.insert(labels.end(), l.begin(), l.end());
    }
    for (auto& p : params) p.zero_grad();
    const Tensor<float> loss = pixel_cross_entropy(model.logits(images), labels);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("non-finite finetune loss at step " + std::to_string(s + 1));
    backward(loss);
    const double lr = cosine_lr(s, fo.steps, fo.lr, fo.warmup_steps);
    adamw_step(std::span<Tensor<float>>(params), optim, lr, ac, decay, model.trainable_names());
    res.losses.push_back(value);

    char line[128];
    std::snprintf(line, sizeof line, "seed=%llu step=%llu lr=%.9g loss=%.9g", static_cast<unsigned long long>(seed),
                  static_cast<unsigned long long>(s + 1), lr, value);
    std::string text = line;
    if (val && fo.eval_every && (s + 1) % fo.eval_every == 0) {
      const auto miou = evaluate(model, *val).report.miou.value_or(0.0);
      res.val_curve.emplace_back(s + 1, miou);
      text += " val_miou=" + fmt_opt(miou);
    }
    for (auto* sink : log_sinks) *sink << text << '\n';
  }
  res.train = evaluate(model, train).report;
  if (val) res.val = evaluate(model, *val).report;
  if (trained) *trained = std::move(model);
  return res;
}

std::string FinetuneSummary::to_log_line() const {
  std::ostringstream os;
  os << "runs=" << runs.size() << " mean_train_miou=" << fmt_opt(mean_train_miou)
     << " mean_val_miou=" << fmt_opt(mean_val_miou);
  return os.str();
}

FinetuneSummary finetune_runs(const RunConfig& cfg, std::span<std::ostream* const> log_sinks,
                              const std::filesystem::path& out_dir) {
  const auto& fo = cfg.finetune;
  const Dataset train = Dataset::load(fo.train_data);
  std::optional<Dataset> val;
  if (!fo.val_data.empty()) val = Dataset::load(fo.val_data);
  std::optional<Checkpoint> pretrained;
  if (!fo.checkpoint.empty()) pretrained = load_checkpoint(fo.checkpoint);
  FinetuneSummary sum;
  double train_total = 0.0, val_total = 0.0;
  for (std::size_t r = 0; r < fo.runs; ++r) {
    std::optional<SegmentationModel> keep;
    SegmentationModel* slot = nullptr;
    FinetuneResult res;
    if (r + 1 == fo.runs && !out_dir.empty()) {
      keep.emplace(SegmentationModel::make(shape_config(cfg, pretrained ? &*pretrained : nullptr),
                                           train.header().tags, 0));
      slot = &*keep;
    }
    res = finetune(cfg, train, val ? &*val : nullptr, pretrained ? &*pretrained : nullptr, cfg.seed + r, log_sinks,
                   slot);
    for (auto* sink : log_sinks) {
      *sink << res.train.to_log_lines("run" + std::to_string(r) + ".train.");
      if (res.val) *sink << res.val->to_log_lines("run" + std::to_string(r) + ".val.");
    }
    train_total += res.train.miou.value_or(0.0);
    if (res.val) val_total += res.val->miou.value_or(0.0);
    sum.runs.push_back(std::move(res));
    if (slot) save_checkpoint(out_dir / "finetuned.slckpt", slot->checkpoint());
  }
  sum.mean_train_miou = train_total / static_cast<double>(fo.runs);
  if (val) sum.mean_val_miou = val_total / static_cast<double>(fo.runs);
  return sum;
}

template struct LightDecoder<float>;
template struct LightDecoder<double>;
template Tensor<float> tokens_to_grid(const GroupedTokens<float>&, std::size_t, std::size_t);
template Tensor<double> tokens_to_grid(const GroupedTokens<double>&, std::size_t, std::size_t);
template Tensor<float> pixel_cross_entropy(const Tensor<float>&, std::span<const std::int8_t>, int);
template Tensor<double> pixel_cross_entropy(const Tensor<double>&, std::span<const std::int8_t>, int);

}  // namespace satloc
