#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "satloc/optim.hpp"
#include "satloc/params.hpp"

namespace satloc {

/// "SLCKPT1\0" file: config text and hash, step, named float32 parameters and
/// optional AdamW moments, all little-endian.
struct Checkpoint {
  std::string config_text;
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<float>> values;
  std::vector<std::vector<float>> first_moment;   // empty or one per parameter
  std::vector<std::vector<float>> second_moment;  // same
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin = "<memory>");
// Writes to a sibling temporary file and renames it over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws FormatError naming the path on I/O or format problems.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Message when the checkpoint came from a config with a different model shape.
std::optional<std::string> hash_mismatch(const Checkpoint& ckpt, std::uint64_t expected_hash);

template <std::floating_point T>
Checkpoint capture_checkpoint(const ParamStore<T>& params, const OptimizerState<T>* optim);

// Copies parameters by name. Strict mode requires an exact name/shape match
// for every parameter and throws FormatError otherwise; lenient mode copies
// whatever matches and returns the count.
template <std::floating_point T>
std::size_t restore_parameters(ParamStore<T>& params, const Checkpoint& ckpt, bool strict);

// Requires moments for every parameter.
template <std::floating_point T>
void restore_optimizer(OptimizerState<T>& optim, const Checkpoint& ckpt);

}  // namespace satloc
