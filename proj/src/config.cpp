#include "satloc/config.hpp"

#include <CLI11.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <variant>
#include <vector>

#include "satloc/errors.hpp"

namespace satloc {

namespace {

static_assert(std::is_same_v<std::size_t, std::uint64_t>);
using FieldRef = std::variant<bool*, std::size_t*, double*, std::string*>;

struct Field {
  const char* key;
  FieldRef ref;
  bool shapes_model;
};

// One table drives parsing, printing and hashing.
std::vector<Field> fields(RunConfig& c) {
  auto& v = c.views;
  auto& f = c.finetune;
  return {
      {"data.path", &c.data_path, false},
      {"geometry.ref_size", &v.ref_size, true},
      {"geometry.query_size", &v.query_size, true},
      {"geometry.patch", &v.patch, true},
      {"geometry.num_queries", &v.num_queries, false},
      {"views.ref_scale_min", &v.ref_scale.min, false},
      {"views.ref_scale_max", &v.ref_scale.max, false},
      {"views.query_scale_min", &v.query_scale.min, false},
      {"views.query_scale_max", &v.query_scale.max, false},
      {"views.aspect_min", &v.aspect.min, false},
      {"views.aspect_max", &v.aspect.max, false},
      {"views.flip_probability", &v.flip_probability, false},
      {"views.max_overlap_tries", &v.max_overlap_tries, false},
      {"groups.setting", &c.groups.setting, true},
      {"groups.merge", &c.groups.merge, true},
      {"groups.sampling", &c.groups.sampling, false},
      {"mask.same_group", &c.same_group_mask, false},
      {"mask.reference_ratio", &c.reference_mask_ratio, false},
      {"cluster.enabled", &c.cluster_enabled, false},
      {"cluster.prototypes", &c.cluster.prototypes, true},
      {"cluster.dim", &c.cluster.dim, true},
      {"cluster.hidden", &c.cluster.hidden, true},
      {"cluster.temperature", &c.cluster.temperature, false},
      {"cluster.sinkhorn_iterations", &c.cluster.sinkhorn_iterations, false},
      {"cluster.entropy_weight", &c.cluster.entropy_weight, false},
      {"encoder.depth", &c.encoder.depth, true},
      {"encoder.width", &c.encoder.width, true},
      {"encoder.heads", &c.encoder.heads, true},
      {"encoder.mlp_ratio", &c.encoder.mlp_ratio, true},
      {"encoder.ge_width", &c.ge_width, true},
      {"optim.lr", &c.optim.lr, false},
      {"optim.weight_decay", &c.optim.weight_decay, false},
      {"optim.beta1", &c.optim.beta1, false},
      {"optim.beta2", &c.optim.beta2, false},
      {"optim.eps", &c.optim.eps, false},
      {"optim.batch_size", &c.optim.batch_size, false},
      {"optim.epochs", &c.optim.epochs, false},
      {"optim.steps", &c.optim.steps, false},
      {"optim.warmup_steps", &c.optim.warmup_steps, false},
      {"optim.warmup_fraction", &c.optim.warmup_fraction, false},
      {"finetune.train_data", &f.train_data, false},
      {"finetune.val_data", &f.val_data, false},
      {"finetune.checkpoint", &f.checkpoint, false},
      {"finetune.classes", &f.classes, false},
      {"finetune.steps", &f.steps, false},
      {"finetune.batch_size", &f.batch_size, false},
      {"finetune.warmup_steps", &f.warmup_steps, false},
      {"finetune.lr", &f.lr, false},
      {"finetune.weight_decay", &f.weight_decay, false},
      {"finetune.runs", &f.runs, false},
      {"finetune.eval_every", &f.eval_every, false},
      {"finetune.same_group_mask", &f.same_group_mask, false},
      {"finetune.groups.setting", &f.groups.setting, false},
      {"finetune.groups.merge", &f.groups.merge, false},
      {"run.seed", &c.seed, false},
      {"run.reference_noise", &c.reference_noise, false},
  };
}

template <class N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + value + "'");
  return out;
}

void assign(const std::string& key, FieldRef ref, const std::string& value) {
  std::visit(
      [&](auto* p) {
        using V = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<V, bool>) {
          if (value == "true" || value == "1" || value == "on" || value == "yes") *p = true;
          else if (value == "false" || value == "0" || value == "off" || value == "no") *p = false;
          else throw ConfigError(key + ": expected a boolean, got '" + value + "'");
        } else if constexpr (std::is_same_v<V, std::string>) {
          *p = value;
        } else {
          *p = parse_number<V>(key, value);
        }
      },
      ref);
}

std::string render(FieldRef ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using V = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<V, bool>) return *p ? "true" : "false";
        else if constexpr (std::is_same_v<V, std::string>) return *p;
        else if constexpr (std::is_same_v<V, double>) {
          // Shortest text that parses back to the same double.
          char buf[32];
          const auto res = std::to_chars(buf, buf + sizeof buf, *p);
          return std::string(buf, res.ptr);
        } else return std::to_string(*p);
      },
      ref);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (auto& f : fields(*this))
    if (key == f.key) return assign(key, f.ref, value);
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig RunConfig::parse(std::string_view text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in{std::string(text)};
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.inputs.empty()) throw ConfigError(origin + ": key '" + item.fullname() + "' has no value");
    // The INI reader splits on commas; group lists use them.
    std::string value = item.inputs.front();
    for (std::size_t i = 1; i < item.inputs.size(); ++i) value += "," + item.inputs[i];
    try {
      cfg.set(item.fullname(), value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  std::ostringstream os;
  for (const auto& f : fields(copy)) os << f.key << " = " << render(f.ref) << "\n";
  return os.str();
}

std::uint64_t RunConfig::model_hash() const {
  RunConfig copy = *this;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : fields(copy)) {
    if (!f.shapes_model) continue;
    for (char ch : std::string(f.key) + "=" + render(f.ref) + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void RunConfig::validate() const {
  encoder.validate();
  const auto& v = views;
  if (v.patch == 0 || v.ref_size % v.patch || v.query_size % v.patch)
    throw ConfigError("geometry: ref_size and query_size must be multiples of patch");
  if (v.num_queries == 0) throw ConfigError("geometry.num_queries must be >= 1");
  auto check_range = [](const ScaleRange& r, const char* name, double lo, double hi) {
    if (!(r.min >= lo && r.min <= r.max && r.max <= hi))
      throw ConfigError(std::string(name) + ": need " + std::to_string(lo) + " <= min <= max <= " + std::to_string(hi));
  };
  check_range(v.ref_scale, "views.ref_scale", 1e-6, 1.0);
  check_range(v.query_scale, "views.query_scale", 1e-6, 1.0);
  check_range(v.aspect, "views.aspect", 1e-3, 1e3);
  if (!(v.flip_probability >= 0 && v.flip_probability <= 1)) throw ConfigError("views.flip_probability must lie in [0, 1]");
  if (!(reference_mask_ratio >= 0 && reference_mask_ratio <= 1)) throw ConfigError("mask.reference_ratio must lie in [0, 1]");
  const std::size_t ge = effective_ge_width();
  if (ge == 0 || ge >= encoder.width || (encoder.width - ge) % 4)
    throw ConfigError("encoder.ge_width " + std::to_string(ge) + " leaves a positional width not divisible by 4");
  if (cluster.prototypes == 0) throw ConfigError("cluster.prototypes must be >= 1");
  if (!(cluster.temperature > 0)) throw ConfigError("cluster.temperature must be positive");
  if (!(optim.lr > 0) || optim.batch_size == 0) throw ConfigError("optim.lr and optim.batch_size must be positive");
  if (optim.steps == 0 && optim.epochs == 0) throw ConfigError("set optim.epochs or optim.steps");
  if (!(optim.warmup_fraction >= 0 && optim.warmup_fraction < 1)) throw ConfigError("optim.warmup_fraction must lie in [0, 1)");
  if (finetune.classes < 2) throw ConfigError("finetune.classes must be >= 2");
  if (finetune.runs == 0 || finetune.batch_size == 0) throw ConfigError("finetune.runs and finetune.batch_size must be >= 1");
  if (groups.setting.empty()) throw ConfigError("groups.setting is empty");
}

}  // namespace satloc
