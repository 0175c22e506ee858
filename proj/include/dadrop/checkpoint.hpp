#pragma once

// Single-file checkpoint archive:
//
//   "DADROPCK" | u32 format_version | u64 header_len | header JSON | f32 data
//
// The JSON header carries the backbone and training configuration, the
// training-state record and an index of the flat arrays (canonical name,
// shape, offset). All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dadrop/training.hpp"

namespace dadrop {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredArray {
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    std::uint32_t format_version = kCheckpointVersion;
    TrainConfig config;
    TrainingState state;
    std::map<std::string, StoredArray> arrays;
};

// Snapshot of parameters, normalization statistics and optimizer velocity.
Checkpoint capture(Model& model, const TrainConfig& config, const TrainingState& state,
                   const SgdMomentum* optimizer = nullptr);
inline Checkpoint capture(Trainer& trainer) {
    return capture(trainer.model(), trainer.config(), trainer.state(), &trainer.optimizer());
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
// Throws CheckpointError on a bad magic, version mismatch or truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies arrays into an existing model. Throws CheckpointError listing every
// mismatched backbone config field, or naming missing arrays.
void restore(Model& model, const Checkpoint& checkpoint, SgdMomentum* optimizer = nullptr);

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& checkpoint);

std::string checkpoint_hash(const std::filesystem::path& path);

}  // namespace dadrop
