#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capseg/network.hpp"
#include "capseg/optim.hpp"

namespace capseg {

// Checkpoint file: magic "CPSC", version u32 LE, parameter entry count
// u32 LE, entries; optimizer entry count u32 LE, entries; config hash u64 LE.
// Entry encoding: name length u16 LE + UTF-8 name, dtype u8 (0 = f32),
// rank u8, extents u32 x rank LE, raw row-major little-endian f32 data.
//
// Values are stored in single precision. Saving rounds the live parameters
// and optimizer moments through f32 as well, so training resumed from a
// checkpoint reproduces an uninterrupted run bitwise.

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    std::vector<CheckpointEntry> params;
    std::vector<CheckpointEntry> optimizer;
    std::uint64_t config_hash = 0;

    const CheckpointEntry* find_opt(const std::string& name) const;
};

void checkpoint_save(const std::string& path, ModelParams& params, AdamState& opt,
                     std::int64_t iteration, std::uint64_t config_hash);

Checkpoint checkpoint_load(const std::string& path);

// Copies checkpoint values into an initialized ModelParams/AdamState pair,
// verifying the config hash and the full shape manifest first. A mismatch
// raises ContractError listing every differing entry.
std::int64_t checkpoint_apply(const Checkpoint& ckpt, ModelParams& params, AdamState* opt,
                              std::uint64_t expected_hash);

// Overwrites only the parameters present in the checkpoint (pretrained
// extractor initialization). Returns the names applied.
std::vector<std::string> checkpoint_apply_subset(const Checkpoint& ckpt, ModelParams& params);

}  // namespace capseg
