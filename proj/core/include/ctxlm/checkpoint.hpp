#pragma once

#include <cstdint>
#include <string>

#include "ctxlm/config.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/train.hpp"

namespace ctxlm {

// Checkpoint file layout (all integers little-endian):
//   bytes 0..6   magic "CTXLM1\n"
//   bytes 7..10  uint32 header length H
//   H bytes      JSON header: model/train configs, step, rng_state, dtype,
//                payload_bytes, payload_checksum (FNV-1a 64 as 16 hex chars),
//                and the tensor manifest [{name, shape, dtype, offset}, ...]
//   payload      raw tensor values at their manifest offsets
//   8 bytes      uint64 FNV-1a 64 of the payload (same value as the header
//                field; either side detects a torn or corrupted file)
//
// Saving the result of a load reproduces the input byte for byte.

template <typename T>
struct LoadedCheckpoint {
  ContextLMParams<T> params;
  OptimizerState<T> opt;
  TrainConfig train;
  int64_t step = 0;
};

// Header-only peek, for dispatching on dtype/config without reading tensors.
struct CheckpointInfo {
  ModelConfig model;
  TrainConfig train;
  int64_t step = 0;
  Dtype dtype = Dtype::f32;
};
CheckpointInfo inspect_checkpoint(const std::string& path);

// Writes atomically (temp file + rename).
template <typename T>
void save_checkpoint(const std::string& path, ContextLMParams<T>& params,
                     const OptimizerState<T>& opt, const TrainConfig& tc, int64_t step);

// Throws IoError naming the fault: bad magic/version, truncated payload,
// malformed or overlapping manifest, checksum mismatch, dtype mismatch.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path);

}  // namespace ctxlm
