#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "voxloc/pose.hpp"

namespace voxloc {

enum class Block : std::uint8_t {
  Air = 0,
  Grass,
  Dirt,
  Stone,
  Sand,
  Water,
  Wood,
  Leaves,
};

using Rgb = std::array<float, 3>;

struct WorldParams {
  int extent = 128;      // blocks per side
  int max_height = 64;   // vertical block levels
  double base_height = 12.0;
  double height_amplitude = 14.0;
  double noise_frequency = 1.0 / 48.0;
  int noise_octaves = 4;
  int water_level = 8;
  int tree_cell = 8;           // jittered-grid cell for tree scattering
  double tree_density = 0.55;  // per-cell probability in dense biomes
  Rgb sky_horizon = {0.70f, 0.80f, 0.92f};
  Rgb sky_zenith = {0.25f, 0.45f, 0.85f};
};

struct unspawnable_world_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct camera_embedded_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class VoxelWorld {
 public:
  VoxelWorld(std::uint64_t seed, const WorldParams& params, std::vector<int> height_field,
             std::vector<std::uint8_t> blocks);

  // heightfield injected directly; for tests that need exact terrain
  static VoxelWorld from_height_field(const WorldParams& params, const std::vector<int>& heights);

  std::uint64_t seed() const { return seed_; }
  const WorldParams& params() const { return params_; }
  int extent() const { return params_.extent; }
  int max_height() const { return params_.max_height; }

  int surface_height(int x, int y) const {
    if (x < 0 || y < 0 || x >= params_.extent || y >= params_.extent) return 0;
    return height_field_[static_cast<std::size_t>(y) * params_.extent + x];
  }

  Block block(int x, int y, int z) const {
    if (z < 0) return Block::Stone;
    if (z >= params_.max_height || x < 0 || y < 0 || x >= params_.extent || y >= params_.extent)
      return Block::Air;
    return static_cast<Block>(
        blocks_[(static_cast<std::size_t>(z) * params_.extent + y) * params_.extent + x]);
  }

  bool is_solid(Block b) const { return b != Block::Air && b != Block::Water; }

  const std::vector<int>& height_field() const { return height_field_; }
  const std::vector<std::uint8_t>& raw_blocks() const { return blocks_; }

  // a column an agent can start on: surface above water
  bool spawnable_column(int x, int y) const {
    return surface_height(x, y) > params_.water_level;
  }

 private:
  std::uint64_t seed_;
  WorldParams params_;
  std::vector<int> height_field_;
  std::vector<std::uint8_t> blocks_;
};

VoxelWorld generate_world(std::uint64_t seed, const WorldParams& params = {});

struct RenderConfig {
  int resolution = 32;
  double fov_deg = 70.0;
  double max_ray_distance = 96.0;
  double fog_start = 48.0;
  double fog_end = 96.0;
  std::array<double, 3> light_dir = {0.45, 0.30, 0.84};

  void validate() const {
    if (resolution < 8) throw std::invalid_argument("render config: resolution must be >= 8");
    if (!(fog_start < fog_end && fog_end <= max_ray_distance))
      throw std::invalid_argument("render config: require fog_start < fog_end <= max_ray_distance");
  }
};

// optional per-pixel diagnostics
struct RenderAux {
  std::vector<std::uint8_t> hit;  // 1 if the ray hit a block
  std::vector<float> distance;
};

// planar CHW image, 3 x res x res, intensities in [0,1]
using Image = std::vector<float>;

Image render_frame(const VoxelWorld& world, const CameraPose& pose, const RenderConfig& cfg,
                   RenderAux* aux = nullptr);

struct Frame {
  Image image;
  CameraPose pose;
};

struct WalkParams {
  int steps = 100;
  double step_length = 1.5;
  double yaw_sigma_deg = 10.0;
  double big_rotation_prob = 0.1;
  double big_rotation_max_deg = 90.0;
  double pitch_sigma_deg = 4.0;
  double exploration_radius = 20.0;  // keeps normalized positions within [-2,2]
  double eye_height = 1.6;
};

struct WalkStats {
  int big_rotations = 0;
  int blocked = 0;
  int jumps = 0;
};

struct Episode {
  std::vector<Frame> frames;
  std::uint64_t world_seed = 0;
  bool valid = false;
  WalkStats stats;
  PoseNormalization normalization;
  bool normalized = false;
};

Episode random_walk_episode(const VoxelWorld& world, std::uint64_t walk_seed,
                            const RenderConfig& render_cfg = {}, const WalkParams& walk = {});

struct PruneThresholds {
  double min_displacement = 8.0;     // max pairwise xy distance, blocks
  double min_pixel_variance = 1e-3;  // mean per-pixel variance across frames
};

bool episode_valid(const Episode& episode, const PruneThresholds& thresholds = {});

Episode normalize_episode_poses(const Episode& episode, double xy_scale = 1.0 / 20.0,
                                double z_scale = 1.0 / 20.0);

Rgb block_color(Block b);

}  // namespace voxloc
