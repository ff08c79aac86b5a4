#pragma once

// Checkpoint container: "ITAR" magic, u32 LE format version, u32 LE manifest
// length, a textual manifest (step, architecture, config snapshot, tensor
// names/shapes), raw little-endian f32 payloads in manifest order, and a
// trailing CRC-32 of the payload region. Loads refuse version mismatches and
// verify the CRC; every parameter round-trips bitwise.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "itarflow/config.hpp"
#include "itarflow/flow.hpp"
#include "itarflow/trainer.hpp"

namespace itarflow {

constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
    enum class Code { io, bad_magic, version_mismatch, truncated, crc_mismatch, manifest_mismatch };
    Code code;
    CheckpointError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

void checkpoint_save(const FlowStack& model, const OptimizerState& state, const RunConfig& cfg,
                     const std::string& path);

struct LoadedCheckpoint {
    FlowStack model;
    OptimizerState state;
    RunConfig config;
    int64_t step = 0;
};

LoadedCheckpoint checkpoint_load(const std::string& path);

uint32_t crc32_bytes(const uint8_t* data, size_t len);

}  // namespace itarflow
