#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxloc/worldgen.hpp"

namespace voxloc {

struct dataset_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetHeader {
  std::uint32_t version = 1;
  std::uint32_t resolution = 32;
  std::uint32_t frames_per_episode = 100;
  std::uint32_t episode_count = 0;
  std::uint32_t pose_dim = 5;
};

// Layout: 24-byte header (magic "VXEP", version, resolution, frames per
// episode, episode count, pose dim), then per episode `frames_per_episode`
// records of [5 little-endian f32: x y z yaw pitch][H*W*3 bytes, row-major
// RGB, quantized by round(v*255)]. Images dequantize to [0,1] by /255.
void write_dataset(const std::vector<Episode>& episodes, const std::string& path);
std::vector<Episode> read_dataset(const std::string& path);
DatasetHeader read_dataset_header(const std::string& path);

struct Task {
  std::vector<Frame> context;
  Frame target;
  int target_index = -1;
  std::vector<int> context_indices;
};

// Uniform draw of context_size + 1 distinct frame indices; the last drawn
// index is the target.
std::vector<int> sample_task_indices(int episode_length, int context_size, std::uint64_t seed);
Task sample_task(const Episode& episode, int context_size, std::uint64_t seed);

struct SplitManifest {
  std::vector<std::uint64_t> train_seeds;
  std::vector<std::uint64_t> test_seeds;

  // train and test episode seed sets must be disjoint
  void validate() const;
};

void write_split_manifest(const SplitManifest& split, const std::string& path);
SplitManifest read_split_manifest(const std::string& path);

}  // namespace voxloc
