#pragma once

#include <cstdint>
#include <string>

#include "voxloc/params.hpp"

namespace voxloc {

// Versioned flat checkpoint: a config JSON string, then (name, shape, f32
// values) per parameter followed by the Adam moments and the step counter.
// Values are stored as 32-bit floats regardless of the in-memory precision.
struct CheckpointData {
  std::string config_json;
  std::int64_t step = 0;
  ParamStore<float> params;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

}  // namespace voxloc
