#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dexmoe/objects.hpp"
#include "dexmoe/policy.hpp"
#include "dexmoe/ppo.hpp"
#include "dexmoe/rollout.hpp"

namespace dexmoe {

enum class Stage : int { base = 0, experts = 1, gate = 2 };

const char* stage_name(Stage s);

inline constexpr uint32_t kCheckpointFormatVersion = 1;

// Everything needed to continue a training stage bitwise from where it
// stopped: parameters, optimizer moments, env states, and rng streams.
struct CheckpointData {
    Stage stage = Stage::base;
    int stage_unit = 0;  // expert index during the expert stage, else 0
    int update_index = 0;
    uint64_t config_hash = 0;
    uint64_t objects_hash = 0;
    double lr = 0.0;
    PolicyEnsemble ens;
    AdamBank bank;
    uint64_t runtime_seed = 0;
    double smoothing_alpha = 0.8;
    std::vector<EnvSlot> envs;
    std::array<uint64_t, 4> train_rng{};
    std::vector<double> success_ring;
    uint32_t ring_cursor = 0;
    uint64_t episodes_completed = 0;
};

uint64_t hash_objects(const std::vector<ObjectSpec>& objects);

// Write-temp, fsync, rename; readers never observe a partial file.
void write_file_atomic(const std::string& path, std::string_view bytes);

// Atomic write (temp file plus rename) with a trailing checksum.
void save_checkpoint(const std::string& path, const CheckpointData& ck);

// Verifies magic, version, and checksum before parsing; any mismatch throws.
CheckpointData load_checkpoint(const std::string& path);

}  // namespace dexmoe
