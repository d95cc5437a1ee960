#pragma once

#include <filesystem>
#include <optional>

#include "spectr/model.hpp"
#include "spectr/train.hpp"

namespace spectr {

// Checkpoint container: magic "SPTR", u32 version, u32 JSON header length,
// JSON metadata (config plus a tensor directory of name/shape/byte-offset),
// then the raw float32 little-endian tensor payloads. Round trips are
// bit-exact; saving model + optimizer state at an epoch boundary is enough to
// resume training with bit-identical subsequent losses.
struct TrainingMeta {
  int epoch = 0;        // completed epochs
  int64_t step = 0;     // completed optimizer steps
  double best_dsc = -1.0;
};

void save_checkpoint(const std::filesystem::path& path, const SpectrModel& model,
                     const TrainConfig* train_cfg = nullptr,
                     const AdamState* adam = nullptr,
                     const TrainingMeta* meta = nullptr);

struct LoadedCheckpoint {
  ModelConfig model_cfg;
  int bands = 0;
  uint64_t seed = 0;
  TrainConfig train_cfg;
  bool has_train_cfg = false;
  TrainingMeta meta;
  int64_t adam_step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;  // "model/..", "adam_m/..", "adam_v/.."
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Rebuilds the model (and optimizer state when present) from a loaded
// checkpoint; throws FormatError when the tensor directory does not cover the
// model's parameters exactly.
SpectrModel restore_model(const LoadedCheckpoint& ck);
std::optional<AdamState> restore_adam(const LoadedCheckpoint& ck, const SpectrModel& model);

}  // namespace spectr
