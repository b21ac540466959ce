#ifndef TWINS_WORKBENCH_DATA_IO_HPP
#define TWINS_WORKBENCH_DATA_IO_HPP

#include <cstdint>
#include <filesystem>
#include <string>

#include "twins/dataset.hpp"

namespace twins::workbench {

struct DatasetSpec {
  enum class Source { Synthetic, Idx };
  Source source = Source::Synthetic;

  // synthetic
  Index classes = 10;
  Index channels = 3;
  Index height = 16;
  Index width = 16;
  Index train_per_class = 64;
  Index val_per_class = 16;
  double noise = 0.3;  // template noise sigma
  std::uint64_t seed = 0;

  // idx
  std::filesystem::path train_images, train_labels, val_images, val_labels;
};

struct SplitDataset {
  Dataset<float> train;
  Dataset<float> val;
};

/// One uniform template per class; samples are clamp(template + N(0, noise^2)).
/// Train and validation draws are disjoint and each split is exactly balanced.
SplitDataset gen_synthetic_dataset(const DatasetSpec& spec);

/// Big-endian IDX: images magic 0x00000803 (n,rows,cols) or 0x00000804 (n,channels,rows,cols),
/// labels magic 0x00000801. Pixels are scaled to [0,1] by /255.
Dataset<float> load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Inverse of load_idx; pixels are quantized to bytes.
void write_idx(const Dataset<float>& data, const std::filesystem::path& images, const std::filesystem::path& labels);

SplitDataset load_dataset(const DatasetSpec& spec);

}  // namespace twins::workbench

#endif  // TWINS_WORKBENCH_DATA_IO_HPP
