#pragma once

#include <string>
#include <vector>

#include "primgen/dataset.hpp"
#include "primgen/inference.hpp"
#include "primgen/metrics.hpp"
#include "primgen/training.hpp"

namespace primgen {

/// Effective run configuration: defaults <- config file <- command-line
/// overrides. Unknown keys are rejected with their dotted path.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GeneratorConfig data;
  int data_count = 128;       // records to generate
  int data_points = 2048;     // condition points per record
  bool data_inline_points = false;
  SamplingConfig sampling;
  EvalConfig eval;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

/// Loads and merges configuration. `config_path` may be empty; overrides are
/// (dotted key, value text) pairs, e.g. {"model.layers", "4"}.
RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::pair<std::string, std::string>>& overrides);

/// The effective configuration as nested JSON text (echoed into output dirs).
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace primgen
