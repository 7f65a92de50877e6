#pragma once

#include <cstdint>
#include <string>

#include "tora2/nn.hpp"

namespace tora2 {

// Run bookkeeping stored alongside the parameters.
struct CheckpointMeta {
    int64_t step = 0;          // training steps completed
    uint64_t config_hash = 0;  // hash of the run config that produced this
};

// Binary checkpoint: 8-byte magic "TORA2CKP", u32 format version, u64 header
// length, a JSON header (meta plus each parameter's name/shape/frozen flag
// and whether optimizer state follows), then raw f64 arrays in parameter
// order — values first, then optimizer first/second moments when present.
// Doubles are written verbatim, so a save/load round trip is bit-exact on
// the little-endian hosts this project targets.
struct CheckpointIO {
    // Saves every parameter; pass the optimizer to make the checkpoint
    // resumable mid-run.
    static void save(const std::string& path, const ParamStore& ps, const CheckpointMeta& meta,
                     const AdamW* opt = nullptr);

    // Restores values into an existing store holding the same parameters
    // (same names, order, shapes — i.e. a model built from the same config).
    // Restores optimizer moments and step count into `opt` when both the
    // file has them and `opt` is given. Frozen flags are recorded in the
    // header for inspection but never applied; freezing is the training
    // run's decision. Throws ValueError on any mismatch, naming the culprit.
    static CheckpointMeta load(const std::string& path, ParamStore& ps, AdamW* opt = nullptr);

    // Reads the header only.
    static CheckpointMeta peek(const std::string& path);
};

}  // namespace tora2
