#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "embmerge/weight_map.hpp"

namespace embmerge {

struct TensorRecord {
    std::string name;
    std::vector<std::int64_t> shape;
    std::string dtype;  // "f32le"
    std::uint64_t offset = 0;
    std::uint64_t nbytes = 0;
};

struct CheckpointManifest {
    int version = 1;
    std::string hash_algorithm = "fnv1a64";
    std::string fingerprint;
    std::optional<std::string> base_fingerprint;  // set for persisted task vectors
    std::vector<TensorRecord> tensors;
};

/// Content hash over names, shapes and little-endian f32 data bytes, in
/// lexicographic tensor order. Stable across runs, platforms and insertion
/// order. Empty map hashes to the FNV-1a offset basis.
std::string fingerprint(const WeightMap& weights);

/// Writes `<stem>.manifest` (JSON) and `<stem>.bin` (raw blob). A trailing
/// ".manifest" or ".bin" on `stem` is stripped. Rejects empty or non-finite
/// maps. Both files are written atomically.
CheckpointManifest save_checkpoint(const WeightMap& weights,
                                   const std::filesystem::path& stem,
                                   const std::optional<std::string>& base_fingerprint = {});

struct LoadedCheckpoint {
    WeightMap weights;
    CheckpointManifest manifest;
};

/// Loads and fully verifies a checkpoint pair: dtype tags, shape/length
/// consistency, offset layout, blob size, recomputed fingerprint, finiteness.
LoadedCheckpoint load_checkpoint_full(const std::filesystem::path& stem);
WeightMap load_checkpoint(const std::filesystem::path& stem);

/// Normalizes a user path to the checkpoint stem (strips .manifest/.bin).
std::filesystem::path checkpoint_stem(const std::filesystem::path& path);

template <typename Scalar>
struct TaskVectorT;
using TaskVector = TaskVectorT<float>;

/// Task vectors persist in the same format with a base_fingerprint field.
CheckpointManifest save_task_vector(const TaskVector& v,
                                    const std::filesystem::path& stem);
TaskVector load_task_vector(const std::filesystem::path& stem);

}  // namespace embmerge
