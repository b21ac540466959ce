#ifndef TWINS_WORKBENCH_CHECKPOINT_HPP
#define TWINS_WORKBENCH_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <string>

#include "twins/network.hpp"

namespace twins::workbench {

inline constexpr char kCheckpointMagic[8] = {'T', 'W', 'I', 'N', 'S', 'C', 'K', 'P'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMetadata {
  std::string method;
  std::string stage;
  std::uint64_t seed = 0;
  int epoch = 0;
};

template <typename Scalar>
struct LoadedCheckpoint {
  Model<Scalar> model;
  CheckpointMetadata metadata;
};

// Layout: 8-byte magic "TWINSCKP", u32 little-endian header length, UTF-8 JSON header
// {version, metadata, tensors: [{name, shape, dtype, offset, length}]}, then the payload.
// Offsets and lengths are in bytes relative to the start of the payload.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Model<Scalar>& model, const CheckpointMetadata& meta);

template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& path);

}  // namespace twins::workbench

#endif  // TWINS_WORKBENCH_CHECKPOINT_HPP
