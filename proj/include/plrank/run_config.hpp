#pragma once

// Run configuration: one JSON document covering world, model, training,
// corpus and evaluation settings plus output paths. Every key is optional on
// input; the effective (defaulted) document is what gets hashed and dumped.

#include <cstdint>
#include <string>
#include <vector>

#include "plrank/policy.hpp"
#include "plrank/synth_world.hpp"
#include "plrank/training.hpp"

namespace plrank {

struct RunConfig {
  std::string run_id = "run";
  std::uint64_t seed = 1;
  std::string data_dir = "data";
  std::string checkpoint_dir = "checkpoints";
  std::string report_dir = "reports";

  WorldConfig world;
  ModelConfig model;
  TrainConfig train;
  double teacher_noise = 0.2;
  std::vector<int> eval_cutoffs{1, 5, 10};
  int probe_shuffles = 10;
  std::vector<int> probe_positions{1, 10, 20};

  /// Copies the master seed and shared sizes into the sub-configs, then
  /// validates everything. Throws ConfigError.
  void finalize();

  /// Effective configuration as pretty JSON (stable key order).
  std::string dump() const;
  /// Hex digest over every field that can change an output. Paths, run_id
  /// and the worker count are excluded.
  std::string hash() const;

  bool operator==(const RunConfig&) const = default;
};

/// Unknown keys, wrong types and invalid values raise ConfigError naming the key.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

}  // namespace plrank
