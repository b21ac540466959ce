#ifndef TWINS_WORKBENCH_EXPERIMENT_HPP
#define TWINS_WORKBENCH_EXPERIMENT_HPP

#include <filesystem>
#include <vector>

#include "twins/workbench/config.hpp"

namespace twins::workbench {

struct RunArtifacts {
  std::uint64_t seed = 0;
  std::filesystem::path directory;
  std::filesystem::path metrics;
  std::filesystem::path checkpoint;
  std::vector<EpochRecord> history;
};

/// Pre-trains on the source task (when configured) and writes pretrain.ckpt and pretrain_metrics.csv.
std::filesystem::path run_pretrain(const ExperimentConfig& cfg, std::uint64_t seed);

/// Fine-tunes on the target task from `init` (a pre-trained checkpoint) or from scratch.
RunArtifacts run_finetune(const ExperimentConfig& cfg, std::uint64_t seed,
                          const std::optional<std::filesystem::path>& init);

/// Full pipeline once per seed: optional pre-training, optional warmup, fine-tuning, evaluation.
std::vector<RunArtifacts> run_experiment(const ExperimentConfig& cfg);

}  // namespace twins::workbench

#endif  // TWINS_WORKBENCH_EXPERIMENT_HPP
