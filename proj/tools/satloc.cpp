#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "satloc/config.hpp"
#include "satloc/dataset.hpp"
#include "satloc/errors.hpp"
#include "satloc/pretrain.hpp"
#include "satloc/raster.hpp"
#include "satloc/segmentation.hpp"

namespace fs = std::filesystem;
using namespace satloc;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c, bool needs_config) {
  auto* opt = app->add_option("--config", c.config, "Run config file (section.key = value)");
  if (needs_config) opt->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Overrides run.seed");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--set", c.overrides, "Config override key=value (repeatable)");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relative patch-position pretraining for multimodal satellite rasters"};
  app.require_subcommand(1);

  // gen-data
  Common gen;
  SyntheticSpec spec;
  std::string bands, task = "flood", file = "data.mmrast";
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic MMRAST1 dataset");
  add_common(gen_cmd, gen, false);
  gen_cmd->add_option("--count", spec.count)->capture_default_str();
  gen_cmd->add_option("--height", spec.height)->capture_default_str();
  gen_cmd->add_option("--width", spec.width)->capture_default_str();
  gen_cmd->add_option("--bands", bands, "Comma-separated band codes (default: all)");
  gen_cmd->add_flag("--easy", spec.easy, "Add strong coordinate ramps");
  gen_cmd->add_flag("--labeled", spec.labeled, "Append per-pixel labels");
  gen_cmd->add_option("--task", task, "Label task")->check(CLI::IsMember({"flood", "positional"}))->capture_default_str();
  gen_cmd->add_option("--file", file, "File name inside --out")->capture_default_str();

  // pretrain
  Common pre;
  std::string resume;
  std::uint64_t max_steps = 0;
  auto* pre_cmd = app.add_subcommand("pretrain", "Run pretraining");
  add_common(pre_cmd, pre, true);
  pre_cmd->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  pre_cmd->add_option("--max-steps", max_steps, "Stop after this many steps (0 = run to the end)");

  // finetune
  Common fin;
  std::string fin_checkpoint;
  auto* fin_cmd = app.add_subcommand("finetune", "Finetune a segmentation decoder end to end");
  add_common(fin_cmd, fin, true);
  fin_cmd->add_option("--checkpoint", fin_checkpoint, "Pretrained checkpoint (default: finetune.checkpoint)");
  std::optional<std::size_t> runs;
  fin_cmd->add_option("--runs", runs, "Independent seeds to average");

  // eval
  Common ev;
  std::string model_path, data_path, pgm_dir;
  auto* eval_cmd = app.add_subcommand("eval", "Score a finetuned segmentation model");
  add_common(eval_cmd, ev, true);
  eval_cmd->add_option("--model", model_path, "Finetuned checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_path, "Labeled dataset (default: finetune.val_data)");
  eval_cmd->add_option("--pgm", pgm_dir, "Directory for predicted-mask PGM dumps");

  // inspect-correspondence
  Common insp;
  std::size_t sample_index = 0;
  auto* insp_cmd = app.add_subcommand("inspect-correspondence", "Print sampled views and h(i) for one sample");
  add_common(insp_cmd, insp, false);
  insp_cmd->add_option("--sample", sample_index)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) {
      if (!bands.empty()) spec.tags = split_csv(bands);
      spec.task = task == "positional" ? LabelTask::kPositional : LabelTask::kFlood;
      fs::create_directories(gen.out);
      const fs::path path = fs::path(gen.out) / file;
      write_dataset(path, generate_synthetic_dataset(spec, gen.seed.value_or(0)));
      std::cout << "wrote=" << path.string() << " count=" << spec.count << '\n';
    } else if (pre_cmd->parsed()) {
      const RunConfig cfg = resolve_config(pre);
      fs::create_directories(pre.out);
      auto data = std::make_shared<const Dataset>(Dataset::load(cfg.data_path));
      Pretrainer trainer(cfg, data);
      if (!resume.empty()) trainer.restore(load_checkpoint(resume));
      std::ofstream(fs::path(pre.out) / "config.txt") << cfg.to_text();
      std::ofstream log(fs::path(pre.out) / "metrics.log", resume.empty() ? std::ios::trunc : std::ios::app);
      std::ostream* sinks[] = {&std::cout, &log};
      trainer.run(sinks, fs::path(pre.out) / "checkpoint.slckpt", max_steps);
    } else if (fin_cmd->parsed()) {
      RunConfig cfg = resolve_config(fin);
      if (!fin_checkpoint.empty()) cfg.finetune.checkpoint = fin_checkpoint;
      if (runs) cfg.finetune.runs = *runs;
      fs::create_directories(fin.out);
      std::ofstream log(fs::path(fin.out) / "finetune.log");
      std::ostream* sinks[] = {&std::cout, &log};
      const FinetuneSummary summary = finetune_runs(cfg, sinks, fs::path(fin.out));
      for (auto* s : sinks) *s << summary.to_log_line() << '\n';
    } else if (eval_cmd->parsed()) {
      RunConfig cfg = resolve_config(ev);
      const std::string path = data_path.empty() ? cfg.finetune.val_data : data_path;
      const Dataset data = Dataset::load(path);
      SegmentationModel model = SegmentationModel::from_checkpoint(load_checkpoint(model_path), data.header().tags);
      const EvalResult res = evaluate(model, data, pgm_dir.empty() ? fs::path{} : fs::path(pgm_dir));
      std::cout << res.to_log_lines();
    } else if (insp_cmd->parsed()) {
      const RunConfig cfg = resolve_config(insp);
      const Dataset data = Dataset::load(cfg.data_path);
      const std::size_t idx[] = {sample_index};
      const PretrainBatch batch = prepare_batch(data, idx, cfg, 0);
      auto view = [](const ViewSpec& v) {
        const auto& c = v.crop;
        std::ostringstream os;
        os << "crop=" << c.top << ',' << c.left << ',' << c.height << ',' << c.width << " flip=" << v.flip
           << " grid=" << v.grid_rows() << 'x' << v.grid_cols();
        return os.str();
      };
      std::cout << "reference " << view(batch.reference_views[0]) << '\n';
      for (std::size_t q = 0; q < batch.correspondences.size(); ++q) {
        const auto& c = batch.correspondences[q];
        std::cout << "query=" << q << ' ' << view(batch.query_views[q]) << " omega=" << c.omega.size() << " h=";
        for (std::size_t i = 0; i < c.h.size(); ++i) std::cout << (i ? "," : "") << c.h[i];
        std::cout << '\n';
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
