#ifndef TWINS_WORKBENCH_METRICS_HPP
#define TWINS_WORKBENCH_METRICS_HPP

#include <filesystem>
#include <vector>

#include "twins/training.hpp"

namespace twins::workbench {

inline constexpr const char* kMetricsHeader =
    "epoch,lr,train_loss,clean_acc,pgd_acc,grad_norm_mean,grad_norm_cv,weight_dist";

/// CSV with the fixed header and one row per epoch; numbers use the shortest round-trip form.
void write_metrics(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

std::vector<EpochRecord> read_metrics(const std::filesystem::path& path);

}  // namespace twins::workbench

#endif  // TWINS_WORKBENCH_METRICS_HPP
