#ifndef TWINS_WORKBENCH_CONFIG_HPP
#define TWINS_WORKBENCH_CONFIG_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "twins/training.hpp"
#include "twins/workbench/data_io.hpp"

namespace twins::workbench {

enum class Precision { F32, F64 };

struct ExperimentConfig {
  std::optional<DatasetSpec> source;
  DatasetSpec target;
  std::array<Index, 2> widths{16, 32};
  Precision precision = Precision::F32;
  std::optional<TrainConfig> pretrain;  // source pre-training from random init; attack radius defaults to 4/255
  TrainConfig finetune;
  std::optional<AttackConfig> eval_attack;
  std::optional<std::filesystem::path> init_checkpoint;
  std::filesystem::path output_dir = "runs";
  std::vector<std::uint64_t> seeds{0};
};

/// Parses and validates a JSON experiment description. Unknown keys, unknown methods
/// and missing referenced files are rejected here, before any compute.
ExperimentConfig parse_experiment_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

}  // namespace twins::workbench

#endif  // TWINS_WORKBENCH_CONFIG_HPP
