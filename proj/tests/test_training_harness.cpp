#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <omp.h>

#include "doctest.h"
#include "satloc/checkpoint.hpp"
#include "satloc/config.hpp"
#include "satloc/dataset.hpp"
#include "satloc/errors.hpp"
#include "satloc/pretrain.hpp"

using namespace satloc;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kTinyBands = {"B2", "B3", "B4", "B8", "A-VV", "A-VH", "DEM"};

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("satloc_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::shared_ptr<const Dataset> tiny_dataset(std::size_t count = 16, bool easy = false) {
  SyntheticSpec spec;
  spec.count = count;
  spec.height = spec.width = 32;
  spec.tags = kTinyBands;
  spec.easy = easy;
  return std::make_shared<const Dataset>(Dataset::from_file(generate_synthetic_dataset(spec, 11)));
}

RunConfig tiny_config() {
  RunConfig cfg = RunConfig::parse(R"(
[geometry]
ref_size = 32
query_size = 16
patch = 8
num_queries = 3
[groups]
setting = B2,B3,B4|B8|A-VV,A-VH|DEM
[cluster]
prototypes = 16
[encoder]
depth = 1
width = 32
heads = 2
mlp_ratio = 2
[optim]
lr = 1e-3
batch_size = 4
epochs = 2
)");
  return cfg;
}

std::vector<std::string> run_lines(const RunConfig& cfg, std::shared_ptr<const Dataset> data, std::uint64_t steps) {
  Pretrainer t(cfg, std::move(data));
  std::vector<std::string> lines;
  for (std::uint64_t s = 0; s < steps; ++s) lines.push_back(t.train_step().line);
  return lines;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config parses sections, rejects unknown keys and bad values") {
  const RunConfig cfg = tiny_config();
  CHECK(cfg.views.ref_size == 32);
  CHECK(cfg.encoder.width == 32);
  CHECK(cfg.optim.weight_decay == doctest::Approx(0.1));
  CHECK(cfg.effective_ge_width() == 8);

  CHECK_THROWS_AS(RunConfig::parse("[optim]\nlearning_rate = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("optim.lr = fast\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("mask.same_group = maybe\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("mask.reference_ratio = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("geometry.ref_size = 30\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("encoder.width = 30\nencoder.heads = 3\n"), ConfigError);
}

TEST_CASE("config text round-trips and the model hash tracks shape knobs only") {
  const RunConfig cfg = tiny_config();
  const RunConfig again = RunConfig::parse(cfg.to_text());
  CHECK(again.to_text() == cfg.to_text());
  CHECK(again.model_hash() == cfg.model_hash());

  RunConfig lr = cfg;
  lr.set("optim.lr", "0.5");
  CHECK(lr.model_hash() == cfg.model_hash());
  RunConfig groups = cfg;
  groups.set("groups.setting", "All");
  CHECK(groups.model_hash() != cfg.model_hash());
}

TEST_CASE("every ablation knob is reachable from the config file") {
  const char* text = R"(
groups.setting = Best
groups.merge = true
groups.sampling = false
mask.same_group = true
mask.reference_ratio = 0.6
cluster.enabled = false
finetune.groups.setting = S2+S1-Separate
finetune.groups.merge = true
finetune.same_group_mask = true
)";
  const RunConfig cfg = RunConfig::parse(text);
  CHECK(cfg.groups.setting == "Best");
  CHECK(cfg.groups.merge);
  CHECK_FALSE(cfg.groups.sampling);
  CHECK(cfg.same_group_mask);
  CHECK(cfg.reference_mask_ratio == doctest::Approx(0.6));
  CHECK_FALSE(cfg.cluster_enabled);
  CHECK(cfg.finetune.groups.setting == "S2+S1-Separate");
  CHECK(cfg.finetune.groups.merge);
  CHECK(cfg.finetune.same_group_mask);
  for (const char* preset : {"S2-Similarity", "S2+S1-Separate", "RGBN+S1-Separate", "S2+S1-Mixed",
                             "S2+S1+DEM-Separate", "Best", "All"})
    CHECK_NOTHROW(RunConfig::parse(std::string("groups.setting = ") + preset + "\n"));
}

TEST_CASE("synthetic dataset carries every band of the modality table") {
  SyntheticSpec spec;
  spec.count = 2;
  spec.height = spec.width = 16;
  const DatasetFile f = generate_synthetic_dataset(spec, 3);
  const std::vector<std::string> table = {"B1",   "B2",   "B3",   "B4",   "B5",   "B6",   "B7",   "B8",
                                          "B8A",  "B9",   "B10",  "B11",  "B12",  "A-VV", "A-VH", "A-HH",
                                          "A-HV", "D-VV", "D-VH", "D-HH", "D-HV", "DEM"};
  CHECK(f.header.channels == 22);
  CHECK(f.header.tags == table);
  CHECK(f.payload.size() == 2u * 22 * 16 * 16);
  for (float s : f.header.stddev) CHECK(s > 0.0f);
}

TEST_CASE("dataset files are deterministic and validated on load") {
  const fs::path dir = scratch_dir("dataset");
  SyntheticSpec spec;
  spec.count = 4;
  spec.height = spec.width = 16;
  spec.tags = kTinyBands;
  spec.labeled = true;
  write_dataset(dir / "a.mmrast", generate_synthetic_dataset(spec, 5));
  write_dataset(dir / "b.mmrast", generate_synthetic_dataset(spec, 5));
  const std::string a = read_bytes(dir / "a.mmrast");
  CHECK(a == read_bytes(dir / "b.mmrast"));
  CHECK(a.substr(0, 8) == std::string("MMRAST1\0", 8));

  SUBCASE("corrupt magic") {
    std::string bad = a;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_dataset(bad), FormatError);
  }
  SUBCASE("truncated payload") { CHECK_THROWS_AS(decode_dataset(a.substr(0, a.size() - 5)), FormatError); }
  SUBCASE("trailing bytes") { CHECK_THROWS_AS(decode_dataset(a + "x"), FormatError); }
  SUBCASE("empty file") { CHECK_THROWS_AS(decode_dataset(""), FormatError); }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_dataset(dir / "none.mmrast"), FormatError); }
  SUBCASE("labels survive the round trip") {
    const DatasetFile f = read_dataset(dir / "a.mmrast");
    CHECK(f.header.num_classes == 2);
    CHECK(f.labels.size() == 4u * 16 * 16);
  }
}

TEST_CASE("an empty dataset is a valid file that cannot feed training") {
  SyntheticSpec spec;
  spec.count = 0;
  spec.tags = kTinyBands;
  const DatasetFile f = generate_synthetic_dataset(spec, 1);
  const Dataset data = Dataset::from_file(decode_dataset(encode_dataset(f)));
  CHECK(data.size() == 0);
  CHECK_THROWS_AS(data.require_trainable(1), ConfigError);
  CHECK_THROWS_AS(Pretrainer(tiny_config(), std::make_shared<const Dataset>(data)), ConfigError);
}

TEST_CASE("standardised channels have zero mean and unit deviation") {
  const auto data = tiny_dataset(8);
  const auto& h = data->header();
  const std::size_t plane = std::size_t{h.height} * h.width;
  for (std::size_t c = 0; c < h.channels; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < data->size(); ++i) {
      const auto r = data->raw(i);
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = r[c * plane + p];
        sum += v;
        sq += v * v;
      }
    }
    const double n = static_cast<double>(plane * data->size());
    CHECK(std::abs(sum / n) < 1e-3);
    CHECK(std::sqrt(sq / n) == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("epoch order is a seeded permutation") {
  const auto data = tiny_dataset(16);
  const auto a = data->epoch_order(9, 0);
  CHECK(a == data->epoch_order(9, 0));
  CHECK(a != data->epoch_order(9, 1));
  CHECK(a != data->epoch_order(10, 0));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> iota(16);
  std::iota(iota.begin(), iota.end(), std::size_t{0});
  CHECK(sorted == iota);
}

TEST_CASE("batch preparation is deterministic and reference noise leaves queries alone") {
  const auto data = tiny_dataset(8);
  RunConfig cfg = tiny_config();
  const std::vector<std::size_t> idx = {3, 1, 4, 1};
  const PretrainBatch a = prepare_batch(*data, idx, cfg, 2);
  const PretrainBatch b = prepare_batch(*data, idx, cfg, 2);
  REQUIRE(a.queries.size() == 12);
  for (std::size_t i = 0; i < a.queries.size(); ++i) {
    CHECK(a.queries[i].data == b.queries[i].data);
    CHECK(a.correspondences[i].h == b.correspondences[i].h);
  }
  cfg.reference_noise = true;
  const PretrainBatch n = prepare_batch(*data, idx, cfg, 2);
  for (std::size_t i = 0; i < a.queries.size(); ++i) {
    CHECK(n.queries[i].data == a.queries[i].data);
    CHECK(n.correspondences[i].h == a.correspondences[i].h);
  }
  for (std::size_t i = 0; i < a.references.size(); ++i) CHECK(n.references[i].data != a.references[i].data);
}

TEST_CASE("two runs with one config and seed log identical lines") {
  const auto data = tiny_dataset(16);
  const RunConfig cfg = tiny_config();
  const auto a = run_lines(cfg, data, 4);
  CHECK(a == run_lines(cfg, data, 4));
  RunConfig other = cfg;
  other.seed = 1;
  CHECK(a != run_lines(other, data, 4));
  CHECK(a.front().find("step=1 epoch=0 lr=") == 0);
}

TEST_CASE("with eta = 1 and no cluster loss the reference content is irrelevant") {
  const auto data = tiny_dataset(16);
  RunConfig cfg = tiny_config();
  cfg.reference_mask_ratio = 1.0;
  cfg.cluster_enabled = false;
  RunConfig noisy = cfg;
  noisy.reference_noise = true;
  CHECK(run_lines(cfg, data, 3) == run_lines(noisy, data, 3));

  // The invariance is specific to the bypass.
  cfg.reference_mask_ratio = 0.5;
  noisy.reference_mask_ratio = 0.5;
  CHECK(run_lines(cfg, data, 1) != run_lines(noisy, data, 1));
}

TEST_CASE("smoke run lowers the position loss") {
  SyntheticSpec spec;
  spec.count = 64;
  spec.tags = kTinyBands;
  spec.easy = true;
  const auto data = std::make_shared<const Dataset>(Dataset::from_file(generate_synthetic_dataset(spec, 2)));
  RunConfig cfg;
  cfg.groups.setting = "B2,B3,B4|B8|A-VV,A-VH|DEM";
  cfg.optim.batch_size = 8;
  cfg.optim.epochs = 2;
  cfg.optim.lr = 1e-3;
  Pretrainer t(cfg, data);
  CHECK(t.total_steps() == 16);
  std::vector<double> loss;
  while (t.step() < t.total_steps()) loss.push_back(t.train_step().report.position_loss);
  // Single batches are noisy; compare the first and last four.
  const double head = (loss[0] + loss[1] + loss[2] + loss[3]) / 4;
  const double tail = (loss[12] + loss[13] + loss[14] + loss[15]) / 4;
  CHECK(tail < head);
}

TEST_CASE("checkpoints round-trip byte for byte") {
  const fs::path dir = scratch_dir("ckpt");
  const auto data = tiny_dataset(16);
  Pretrainer t(tiny_config(), data);
  t.train_step();
  save_checkpoint(dir / "a.slckpt", t.checkpoint());
  const Checkpoint loaded = load_checkpoint(dir / "a.slckpt");
  CHECK(loaded.step == 1);
  save_checkpoint(dir / "b.slckpt", loaded);
  CHECK(read_bytes(dir / "a.slckpt") == read_bytes(dir / "b.slckpt"));

  Pretrainer fresh(tiny_config(), data);
  fresh.restore(loaded);
  CHECK(fresh.warnings().empty());
  const auto& pa = t.model().params().tensors();
  const auto& pb = fresh.model().params().tensors();
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));

  const std::string bytes = read_bytes(dir / "a.slckpt");
  CHECK_THROWS_AS(decode_checkpoint("XX" + bytes.substr(2)), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.slckpt"), FormatError);
}

TEST_CASE("loading under a different group setting warns") {
  const auto data = tiny_dataset(16);
  RunConfig a = tiny_config();
  a.groups.setting = "B2,B3|B4";
  RunConfig b = a;
  b.groups.setting = "B2,B4|B3";  // same parameter shapes, different grouping
  Pretrainer src(a, data);
  Pretrainer dst(b, data);
  dst.restore(src.checkpoint());
  REQUIRE(dst.warnings().size() == 1);
  CHECK(dst.warnings().front().find("hash") != std::string::npos);

  RunConfig c = a;
  c.groups.setting = "All";
  Pretrainer mismatched(c, data);
  CHECK_THROWS_AS(mismatched.restore(src.checkpoint()), FormatError);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted losses") {
  const fs::path dir = scratch_dir("resume");
  const auto data = tiny_dataset(16);
  const RunConfig cfg = tiny_config();
  Pretrainer straight(cfg, data);
  std::vector<double> expected;
  for (int s = 0; s < 10; ++s) {
    const double v = straight.train_step().report.combined_value;
    if (s >= 5) expected.push_back(v);
  }
  Pretrainer first(cfg, data);
  for (int s = 0; s < 5; ++s) first.train_step();
  save_checkpoint(dir / "mid.slckpt", first.checkpoint());

  Pretrainer resumed(cfg, data);
  resumed.restore(load_checkpoint(dir / "mid.slckpt"));
  CHECK(resumed.step() == 5);
  for (std::size_t s = 0; s < expected.size(); ++s)
    CHECK(std::abs(resumed.train_step().report.combined_value - expected[s]) <= 1e-6);
}

TEST_CASE("a non-finite loss aborts and keeps the last good checkpoint") {
  const fs::path dir = scratch_dir("nan");
  const auto data = tiny_dataset(16);
  RunConfig cfg = tiny_config();
  Pretrainer t(cfg, data);
  std::ostringstream log;
  std::ostream* sinks[] = {&log};
  t.run(sinks, dir / "run.slckpt", t.steps_per_epoch());
  REQUIRE(fs::exists(dir / "run.slckpt"));
  const std::string good = read_bytes(dir / "run.slckpt");

  auto& w = t.model().params().tensors().front();
  w.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(t.run(sinks, dir / "run.slckpt"), NumericError);
  CHECK(t.step() == t.steps_per_epoch());
  CHECK(read_bytes(dir / "run.slckpt") == good);
  CHECK(load_checkpoint(dir / "run.slckpt").step == t.steps_per_epoch());
}

TEST_CASE("warmup defaults to five percent of the schedule") {
  RunConfig cfg;
  CHECK(cfg.optim.warmup_for(2000) == 100);
  CHECK(cfg.optim.warmup_for(10) == 1);
  cfg.set("optim.warmup_steps", "7");
  CHECK(cfg.optim.warmup_for(2000) == 7);
  cfg = RunConfig{};
  cfg.set("optim.warmup_fraction", "0");
  CHECK(cfg.optim.warmup_for(2000) == 0);
  cfg.set("optim.warmup_fraction", "1.5");
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("metric logs do not depend on the thread count") {
  const auto data = tiny_dataset(16);
  RunConfig cfg = tiny_config();
  cfg.set("mask.same_group", "true");
  auto log_with = [&](int threads) {
    const int saved = omp_get_max_threads();
    omp_set_num_threads(threads);
    std::ostringstream os;
    std::ostream* sinks[] = {&os};
    Pretrainer(cfg, data).run(sinks, {}, 3);
    omp_set_num_threads(saved);
    return os.str();
  };
  CHECK(log_with(1) == log_with(4));
}

TEST_CASE("a run stopped mid-epoch leaves a resumable checkpoint") {
  const fs::path dir = scratch_dir("midepoch");
  const auto data = tiny_dataset(16);
  RunConfig cfg = tiny_config();
  Pretrainer first(cfg, data);
  REQUIRE(first.steps_per_epoch() == 4);
  first.run({}, dir / "c.slckpt", 3);
  REQUIRE(fs::exists(dir / "c.slckpt"));
  CHECK(load_checkpoint(dir / "c.slckpt").step == 3);

  Pretrainer straight(cfg, data);
  for (int s = 0; s < 3; ++s) straight.train_step();
  Pretrainer resumed(cfg, data);
  resumed.restore(load_checkpoint(dir / "c.slckpt"));
  CHECK(resumed.train_step().line == straight.train_step().line);
}
