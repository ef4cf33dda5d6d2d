// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "knowtrace/model.hpp"

#include <string>

namespace knowtrace::model {

// Checkpoint layout: <dir>/params.bin holds every tensor as raw little-endian
// float32 in for_each_tensor order; <dir>/checkpoint.json is the sidecar
// manifest (tensor names/shapes, config, seed, params hash).
void save_checkpoint(const Params& params, const std::string& dir, uint64_t train_seed,
                     const std::string& note = "");

Params load_checkpoint(const std::string& dir);

/// FNV-1a hash of the serialized tensor bytes, hex encoded.
std::string params_hash(const Params& params);

}  // namespace knowtrace::model
