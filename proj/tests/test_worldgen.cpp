#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "voxloc/rng.hpp"
#include "voxloc/worldgen.hpp"

using namespace voxloc;

namespace {

WorldParams small_params() {
  WorldParams p;
  p.extent = 64;
  return p;
}

// flat world at a given height, no trees, no water above it
VoxelWorld flat_world(int height, int extent = 64) {
  WorldParams p;
  p.extent = extent;
  p.water_level = 0;
  std::vector<int> hf(static_cast<std::size_t>(extent) * extent, height);
  return VoxelWorld::from_height_field(p, hf);
}

int count_sky(const RenderAux& aux) {
  int n = 0;
  for (auto h : aux.hit)
    if (!h) ++n;
  return n;
}

}  // namespace

TEST(WorldGen, DeterministicForSameSeed) {
  VoxelWorld a = generate_world(7, small_params());
  VoxelWorld b = generate_world(7, small_params());
  EXPECT_EQ(a.height_field(), b.height_field());
  EXPECT_EQ(a.raw_blocks(), b.raw_blocks());
}

TEST(WorldGen, DifferentSeedsDiffer) {
  VoxelWorld a = generate_world(7, small_params());
  VoxelWorld b = generate_world(8, small_params());
  EXPECT_NE(a.height_field(), b.height_field());
}

TEST(WorldGen, UnspawnableWorldRejected) {
  WorldParams p = small_params();
  p.water_level = p.max_height;  // above any terrain
  EXPECT_THROW(generate_world(7, p), unspawnable_world_error);
}

TEST(WorldGen, WaterFillsAirBelowWaterLevel) {
  VoxelWorld w = generate_world(3, small_params());
  const WorldParams& p = w.params();
  for (int y = 0; y < p.extent; y += 5)
    for (int x = 0; x < p.extent; x += 5) {
      int h = w.surface_height(x, y);
      for (int z = h; z < p.water_level; ++z) EXPECT_EQ(w.block(x, y, z), Block::Water);
    }
}

TEST(WorldGen, ExtentTooSmallRejected) {
  WorldParams p;
  p.extent = 16;
  EXPECT_THROW(generate_world(1, p), std::invalid_argument);
}

TEST(Render, DeterministicBytes) {
  VoxelWorld w = generate_world(11, small_params());
  CameraPose pose{32.0, 32.0, w.surface_height(32, 32) + 1.6, 45.0, 5.0};
  Image a = render_frame(w, pose, RenderConfig{});
  Image b = render_frame(w, pose, RenderConfig{});
  EXPECT_EQ(a, b);
}

TEST(Render, HorizonSplitsSkyAndGround) {
  VoxelWorld w = flat_world(8);
  CameraPose pose{32.0, 32.0, 9.6, 0.0, 0.0};
  RenderConfig cfg;
  RenderAux aux;
  render_frame(w, pose, cfg, &aux);
  const int res = cfg.resolution;
  // pitch 0: everything above the horizon row is sky, bottom rows terrain
  for (int row = 0; row < res / 4; ++row)
    for (int col = 0; col < res; ++col) EXPECT_EQ(aux.hit[row * res + col], 0);
  for (int row = 3 * res / 4; row < res; ++row)
    for (int col = 0; col < res; ++col) EXPECT_EQ(aux.hit[row * res + col], 1);
}

// Analytic oracle for flat terrain: intersect each pixel ray with the ground
// plane, independent of the DDA traversal.
namespace {

int analytic_sky_count(const CameraPose& pose, const RenderConfig& cfg, double ground_z,
                       int extent) {
  const double tan_half = std::tan(cfg.fov_deg * kPi / 360.0);
  const double yr = pose.yaw * kPi / 180.0;
  const double pr = pose.pitch * kPi / 180.0;
  const double fx = std::cos(pr) * std::cos(yr), fy = std::cos(pr) * std::sin(yr),
               fz = -std::sin(pr);
  const double rx = std::sin(yr), ry = -std::cos(yr);
  const double ux = ry * fz, uy = -rx * fz, uz = rx * fy - ry * fx;
  int sky = 0;
  for (int row = 0; row < cfg.resolution; ++row)
    for (int col = 0; col < cfg.resolution; ++col) {
      double py = (1.0 - 2.0 * (row + 0.5) / cfg.resolution) * tan_half;
      double px = (2.0 * (col + 0.5) / cfg.resolution - 1.0) * tan_half;
      double dx = fx + px * rx + py * ux, dy = fy + px * ry + py * uy, dz = fz + py * uz;
      double n = std::sqrt(dx * dx + dy * dy + dz * dz);
      dx /= n;
      dy /= n;
      dz /= n;
      if (dz >= 0) {
        ++sky;
        continue;
      }
      double t = (ground_z - pose.z) / dz;
      double hx = pose.x + t * dx, hy = pose.y + t * dy;
      bool hits = t <= cfg.max_ray_distance && hx >= 0 && hx < extent && hy >= 0 && hy < extent;
      if (!hits) ++sky;
    }
  return sky;
}

}  // namespace

TEST(Render, MaxUpPitchSkyFractionMatchesGeometry) {
  VoxelWorld w = flat_world(8);
  CameraPose pose{32.0, 32.0, 9.6, 0.0, -20.0};
  RenderConfig cfg;
  RenderAux aux;
  render_frame(w, pose, cfg, &aux);
  int sky = count_sky(aux);
  int predicted = analytic_sky_count(pose, cfg, 8.0, w.extent());
  // DDA and the plane intersection may disagree on grazing boundary pixels
  EXPECT_NEAR(sky, predicted, 0.02 * cfg.resolution * cfg.resolution);
  // at fov 70 the ground band below the horizon is ~23% of the image
  EXPECT_GE(sky, static_cast<int>(0.70 * cfg.resolution * cfg.resolution));
}

TEST(Render, LookingDownNeverAddsSky) {
  VoxelWorld w = flat_world(8);
  RenderConfig cfg;
  int prev_sky = cfg.resolution * cfg.resolution + 1;
  for (double pitch = -20.0; pitch < 30.0; pitch += 5.0) {
    CameraPose pose{32.0, 32.0, 9.6, 0.0, pitch};
    RenderAux aux;
    render_frame(w, pose, cfg, &aux);
    int sky = count_sky(aux);
    EXPECT_LE(sky, prev_sky) << "pitch " << pitch;
    prev_sky = sky;
  }
}

TEST(Render, CameraEmbeddedError) {
  VoxelWorld w = flat_world(8);
  CameraPose pose{32.0, 32.0, 4.0, 0.0, 0.0};  // inside the ground
  EXPECT_THROW(render_frame(w, pose, RenderConfig{}), camera_embedded_error);
}

TEST(Render, IntensitiesInRange) {
  VoxelWorld w = generate_world(3, small_params());
  CameraPose pose{32.0, 32.0, w.surface_height(32, 32) + 1.6, -120.0, 10.0};
  Image img = render_frame(w, pose, RenderConfig{});
  for (float v : img) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Walk, Produces100Frames) {
  VoxelWorld w = generate_world(21, small_params());
  Episode ep = random_walk_episode(w, 5);
  EXPECT_EQ(ep.frames.size(), 100u);
  EXPECT_EQ(ep.world_seed, w.seed());
}

TEST(Walk, DeterministicPoseSequence) {
  VoxelWorld w = generate_world(21, small_params());
  Episode a = random_walk_episode(w, 5);
  Episode b = random_walk_episode(w, 5);
  ASSERT_EQ(a.frames.size(), b.frames.size());
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    EXPECT_EQ(a.frames[i].pose.x, b.frames[i].pose.x);
    EXPECT_EQ(a.frames[i].pose.yaw, b.frames[i].pose.yaw);
    EXPECT_EQ(a.frames[i].image, b.frames[i].image);
  }
}

TEST(Walk, PoseDomains) {
  VoxelWorld w = generate_world(33, small_params());
  Episode ep = random_walk_episode(w, 17);
  for (const Frame& f : ep.frames) {
    EXPECT_GE(f.pose.yaw, -180.0);
    EXPECT_LT(f.pose.yaw, 180.0);
    EXPECT_GE(f.pose.pitch, -20.0);
    EXPECT_LT(f.pose.pitch, 30.0);
  }
}

TEST(Walk, BlockedByCliffStillTakes100Steps) {
  // wall world: a sheer 10-block cliff bisecting the map
  WorldParams p;
  p.extent = 64;
  p.water_level = 0;
  std::vector<int> hf(static_cast<std::size_t>(p.extent) * p.extent, 6);
  for (int y = 0; y < p.extent; ++y)
    for (int x = 34; x < p.extent; ++x) hf[static_cast<std::size_t>(y) * p.extent + x] = 16;
  VoxelWorld w = VoxelWorld::from_height_field(p, hf);

  Episode ep = random_walk_episode(w, 3);
  EXPECT_EQ(ep.frames.size(), 100u);
  // the policy must keep acting: each step either moved or rotated
  int acted = 0;
  for (std::size_t i = 1; i < ep.frames.size(); ++i) {
    const auto& a = ep.frames[i - 1].pose;
    const auto& b = ep.frames[i].pose;
    if (a.x != b.x || a.y != b.y || a.yaw != b.yaw) ++acted;
  }
  EXPECT_EQ(acted, 99);
  EXPECT_GT(ep.stats.blocked + ep.stats.jumps, 0);
}

TEST(Walk, LargeRotationFrequencyMatchesConfig) {
  WalkParams walk;
  RenderConfig cfg;
  cfg.resolution = 8;  // cheap renders; this test is about the policy
  VoxelWorld w = generate_world(55, small_params());
  int total_steps = 0, big = 0;
  for (int e = 0; e < 120; ++e) {
    Episode ep = random_walk_episode(w, 1000 + e, cfg, walk);
    big += ep.stats.big_rotations;
    total_steps += walk.steps;
  }
  double freq = static_cast<double>(big) / total_steps;
  EXPECT_NEAR(freq, walk.big_rotation_prob, 0.05);
}

TEST(Prune, StationaryAgentInvalid) {
  VoxelWorld w = flat_world(8);
  Episode ep;
  ep.world_seed = 1;
  CameraPose pose{32.0, 32.0, 9.6, 0.0, 0.0};
  Frame f;
  f.pose = pose;
  f.image = render_frame(w, pose, RenderConfig{});
  for (int i = 0; i < 100; ++i) ep.frames.push_back(f);
  EXPECT_FALSE(episode_valid(ep));
}

TEST(Prune, HealthyWalkValid) {
  VoxelWorld w = generate_world(21, small_params());
  Episode ep = random_walk_episode(w, 5);
  EXPECT_TRUE(episode_valid(ep));
}

TEST(Prune, UnderwaterNearConstantImagesInvalid) {
  // deep flooded world: agent walks on terrain far below the water surface
  WorldParams p;
  p.extent = 64;
  p.water_level = 30;
  std::vector<int> hf(static_cast<std::size_t>(p.extent) * p.extent, 4);
  VoxelWorld w = VoxelWorld::from_height_field(p, hf);

  // spawnable_column is false everywhere; drive the frames directly
  Episode ep;
  ep.world_seed = 2;
  Rng rng(9);
  double x = 32.0, y = 32.0;
  for (int i = 0; i < 100; ++i) {
    x += rng.uniform(-0.3, 0.3);
    y += 0.2;  // drifts enough to pass the displacement check alone? no: ~20 blocks
    CameraPose pose{x, y, 5.6, wrap_yaw(rng.uniform(-180.0, 180.0)), 0.0};
    Frame f;
    f.pose = pose;
    f.image = render_frame(w, pose, RenderConfig{});
    ep.frames.push_back(std::move(f));
  }
  // displacement check alone passes (20 blocks), the variance check prunes
  PruneThresholds th;
  th.min_displacement = 8.0;
  EXPECT_FALSE(episode_valid(ep, th));
}

TEST(Normalize, CentroidMapsToOrigin) {
  Episode ep;
  for (int i = 0; i < 4; ++i) {
    Frame f;
    f.pose = CameraPose{10.0 + i, 20.0, 5.0, 0.0, 0.0};
    ep.frames.push_back(f);
  }
  Episode n = normalize_episode_poses(ep);
  double cx = 0;
  for (const auto& f : n.frames) cx += f.pose.x;
  EXPECT_NEAR(cx / 4.0, 0.0, 1e-12);
  EXPECT_NEAR(n.frames[0].pose.y, 0.0, 1e-12);
}

TEST(Normalize, TwentyBlocksEastIsOne) {
  Episode ep;
  Frame a, b;
  a.pose = CameraPose{0.0, 0.0, 5.0, 0.0, 0.0};
  b.pose = CameraPose{40.0, 0.0, 5.0, 0.0, 0.0};  // centroid 20, so b sits 20 east of it
  ep.frames = {a, b};
  Episode n = normalize_episode_poses(ep);
  EXPECT_NEAR(n.frames[1].pose.x, 1.0, 1e-12);
  EXPECT_NEAR(n.frames[0].pose.x, -1.0, 1e-12);
}

TEST(Normalize, RoundTrip) {
  VoxelWorld w = generate_world(21, small_params());
  Episode ep = random_walk_episode(w, 5);
  Episode n = normalize_episode_poses(ep);
  ASSERT_TRUE(n.normalized);
  for (std::size_t i = 0; i < ep.frames.size(); ++i) {
    CameraPose back = n.normalization.invert(n.frames[i].pose);
    EXPECT_NEAR(back.x, ep.frames[i].pose.x, 1e-6);
    EXPECT_NEAR(back.y, ep.frames[i].pose.y, 1e-6);
    EXPECT_NEAR(back.z, ep.frames[i].pose.z, 1e-6);
  }
}

TEST(Normalize, ValidEpisodesStayWithinTwo) {
  for (std::uint64_t seed : {3u, 14u, 25u}) {
    VoxelWorld w = generate_world(seed, small_params());
    Episode ep = random_walk_episode(w, seed * 31 + 1);
    if (!episode_valid(ep)) continue;
    Episode n = normalize_episode_poses(ep);
    for (const Frame& f : n.frames) {
      EXPECT_LE(std::abs(f.pose.x), 2.0);
      EXPECT_LE(std::abs(f.pose.y), 2.0);
    }
  }
}
