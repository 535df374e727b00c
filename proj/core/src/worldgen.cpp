#include "voxloc/worldgen.hpp"

#include <algorithm>
#include <cmath>

#include "voxloc/rng.hpp"

namespace voxloc {

namespace {

// lattice value in [0,1) from (seed, xi, yi, channel)
double lattice(std::uint64_t seed, int xi, int yi, int channel) {
  std::uint64_t h = hash_combine(seed, static_cast<std::uint64_t>(channel) << 40);
  h = hash_combine(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(xi)));
  h = hash_combine(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(yi)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// bilinear value noise in [0,1)
double value_noise(std::uint64_t seed, double x, double y, int channel) {
  int xi = static_cast<int>(std::floor(x));
  int yi = static_cast<int>(std::floor(y));
  double tx = smoothstep(x - xi);
  double ty = smoothstep(y - yi);
  double v00 = lattice(seed, xi, yi, channel);
  double v10 = lattice(seed, xi + 1, yi, channel);
  double v01 = lattice(seed, xi, yi + 1, channel);
  double v11 = lattice(seed, xi + 1, yi + 1, channel);
  double a = v00 + (v10 - v00) * tx;
  double b = v01 + (v11 - v01) * tx;
  return a + (b - a) * ty;
}

// multi-octave value noise in [-1, 1]
double fbm(std::uint64_t seed, double x, double y, double freq, int octaves, int channel) {
  double sum = 0.0, amp = 1.0, norm = 0.0;
  for (int o = 0; o < octaves; ++o) {
    sum += amp * (2.0 * value_noise(seed, x * freq, y * freq, channel * 16 + o) - 1.0);
    norm += amp;
    amp *= 0.5;
    freq *= 2.0;
  }
  return sum / norm;
}

constexpr int kBiomeChannel = 7;

void set_block(std::vector<std::uint8_t>& blocks, const WorldParams& p, int x, int y, int z,
               Block b) {
  if (x < 0 || y < 0 || z < 0 || x >= p.extent || y >= p.extent || z >= p.max_height) return;
  blocks[(static_cast<std::size_t>(z) * p.extent + y) * p.extent + x] =
      static_cast<std::uint8_t>(b);
}

Block get_block(const std::vector<std::uint8_t>& blocks, const WorldParams& p, int x, int y,
                int z) {
  return static_cast<Block>(
      blocks[(static_cast<std::size_t>(z) * p.extent + y) * p.extent + x]);
}

std::vector<std::uint8_t> build_blocks(std::uint64_t seed, const WorldParams& p,
                                       const std::vector<int>& heights, bool plant_trees) {
  std::vector<std::uint8_t> blocks(
      static_cast<std::size_t>(p.extent) * p.extent * p.max_height,
      static_cast<std::uint8_t>(Block::Air));

  for (int y = 0; y < p.extent; ++y) {
    for (int x = 0; x < p.extent; ++x) {
      int h = heights[static_cast<std::size_t>(y) * p.extent + x];
      double biome = value_noise(seed, x * (p.noise_frequency / 2.0), y * (p.noise_frequency / 2.0),
                                 kBiomeChannel);
      bool sandy = biome < 0.25 || h <= p.water_level + 1;
      for (int z = 0; z < h; ++z) {
        Block b;
        if (z == h - 1)
          b = sandy ? Block::Sand : Block::Grass;
        else if (z >= h - 4)
          b = sandy ? Block::Sand : Block::Dirt;
        else
          b = Block::Stone;
        set_block(blocks, p, x, y, z, b);
      }
      // water fills all air below the water level
      for (int z = h; z < p.water_level; ++z) set_block(blocks, p, x, y, z, Block::Water);
    }
  }

  if (plant_trees) {
    int cells = p.extent / p.tree_cell;
    for (int cy = 0; cy < cells; ++cy) {
      for (int cx = 0; cx < cells; ++cx) {
        std::uint64_t cell_hash =
            hash_combine(hash_combine(derive_seed(seed, "trees"), static_cast<std::uint64_t>(cx)),
                         static_cast<std::uint64_t>(cy));
        double u = static_cast<double>(cell_hash >> 11) * 0x1.0p-53;
        double biome = value_noise(seed, (cx + 0.5) * p.tree_cell * (p.noise_frequency / 2.0),
                                   (cy + 0.5) * p.tree_cell * (p.noise_frequency / 2.0),
                                   kBiomeChannel);
        double density = p.tree_density * std::clamp((biome - 0.3) / 0.5, 0.0, 1.0);
        if (u >= density) continue;
        std::uint64_t jitter = hash_combine(cell_hash, 0x9e37);
        int px = cx * p.tree_cell + 1 + static_cast<int>((jitter >> 8) % (p.tree_cell - 2));
        int py = cy * p.tree_cell + 1 + static_cast<int>((jitter >> 24) % (p.tree_cell - 2));
        int ground = heights[static_cast<std::size_t>(py) * p.extent + px];
        if (ground <= p.water_level + 1) continue;
        if (get_block(blocks, p, px, py, ground - 1) != Block::Grass) continue;
        int trunk = 3 + static_cast<int>((jitter >> 40) % 3);  // 3..5
        if (ground + trunk + 2 >= p.max_height) continue;
        for (int z = ground; z < ground + trunk; ++z) set_block(blocks, p, px, py, z, Block::Wood);
        int top = ground + trunk;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -2; dy <= 2; ++dy)
            for (int dx = -2; dx <= 2; ++dx) {
              if (std::abs(dx) + std::abs(dy) + std::abs(dz) > 3) continue;
              int bx = px + dx, by = py + dy, bz = top + dz;
              if (bx < 0 || by < 0 || bx >= p.extent || by >= p.extent || bz < 0 ||
                  bz >= p.max_height)
                continue;
              if (get_block(blocks, p, bx, by, bz) == Block::Air)
                set_block(blocks, p, bx, by, bz, Block::Leaves);
            }
      }
    }
  }
  return blocks;
}

}  // namespace

VoxelWorld::VoxelWorld(std::uint64_t seed, const WorldParams& params, std::vector<int> height_field,
                       std::vector<std::uint8_t> blocks)
    : seed_(seed), params_(params), height_field_(std::move(height_field)),
      blocks_(std::move(blocks)) {}

VoxelWorld VoxelWorld::from_height_field(const WorldParams& params,
                                         const std::vector<int>& heights) {
  if (static_cast<int>(heights.size()) != params.extent * params.extent)
    throw std::invalid_argument("from_height_field: size mismatch");
  auto blocks = build_blocks(0, params, heights, /*plant_trees=*/false);
  return VoxelWorld(0, params, heights, std::move(blocks));
}

VoxelWorld generate_world(std::uint64_t seed, const WorldParams& params) {
  if (params.extent < 32) throw std::invalid_argument("world params: extent must be >= 32");
  std::vector<int> heights(static_cast<std::size_t>(params.extent) * params.extent);
  int max_h = 0;
  for (int y = 0; y < params.extent; ++y) {
    for (int x = 0; x < params.extent; ++x) {
      double n = fbm(seed, x, y, params.noise_frequency, params.noise_octaves, 0);
      int h = static_cast<int>(std::lround(params.base_height + params.height_amplitude * n));
      h = std::clamp(h, 1, params.max_height - 10);
      heights[static_cast<std::size_t>(y) * params.extent + x] = h;
      max_h = std::max(max_h, h);
    }
  }
  if (max_h <= params.water_level)
    throw unspawnable_world_error("unspawnable world: water level " +
                                  std::to_string(params.water_level) +
                                  " covers the highest terrain (" + std::to_string(max_h) + ")");
  auto blocks = build_blocks(seed, params, heights, /*plant_trees=*/true);
  return VoxelWorld(seed, params, std::move(heights), std::move(blocks));
}

Rgb block_color(Block b) {
  switch (b) {
    case Block::Grass: return {0.30f, 0.55f, 0.20f};
    case Block::Dirt: return {0.45f, 0.33f, 0.22f};
    case Block::Stone: return {0.50f, 0.50f, 0.52f};
    case Block::Sand: return {0.76f, 0.70f, 0.50f};
    case Block::Water: return {0.15f, 0.30f, 0.60f};
    case Block::Wood: return {0.42f, 0.30f, 0.16f};
    case Block::Leaves: return {0.20f, 0.45f, 0.15f};
    case Block::Air: break;
  }
  return {0.0f, 0.0f, 0.0f};
}

namespace {

struct Vec3 {
  double x, y, z;
};

Vec3 normalize(const Vec3& v) {
  double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
  return {v.x / n, v.y / n, v.z / n};
}

Rgb sky_color(const WorldParams& p, const Vec3& dir) {
  double t = std::clamp(dir.z, 0.0, 1.0);
  Rgb c;
  for (int i = 0; i < 3; ++i)
    c[i] = static_cast<float>(p.sky_horizon[i] + (p.sky_zenith[i] - p.sky_horizon[i]) * t);
  return c;
}

}  // namespace

Image render_frame(const VoxelWorld& world, const CameraPose& pose, const RenderConfig& cfg,
                   RenderAux* aux) {
  cfg.validate();
  const WorldParams& wp = world.params();
  if (pose.x < 0 || pose.y < 0 || pose.x >= wp.extent || pose.y >= wp.extent || pose.z < 0 ||
      pose.z >= wp.max_height)
    throw std::invalid_argument("render_frame: pose outside world bounds");

  const int bx = static_cast<int>(std::floor(pose.x));
  const int by = static_cast<int>(std::floor(pose.y));
  const int bz = static_cast<int>(std::floor(pose.z));
  Block cam_block = world.block(bx, by, bz);
  if (world.is_solid(cam_block))
    throw camera_embedded_error("render_frame: camera embedded in solid block at (" +
                                std::to_string(bx) + "," + std::to_string(by) + "," +
                                std::to_string(bz) + ")");
  const bool underwater = cam_block == Block::Water;

  CameraPose p = pose.canonical();
  const double yr = p.yaw * kPi / 180.0;
  const double pr = p.pitch * kPi / 180.0;
  const Vec3 fwd = {std::cos(pr) * std::cos(yr), std::cos(pr) * std::sin(yr), -std::sin(pr)};
  const Vec3 right = normalize({std::sin(yr), -std::cos(yr), 0.0});
  const Vec3 up = {right.y * fwd.z - right.z * fwd.y, right.z * fwd.x - right.x * fwd.z,
                   right.x * fwd.y - right.y * fwd.x};

  const int res = cfg.resolution;
  const double tan_half = std::tan(cfg.fov_deg * kPi / 360.0);
  const Vec3 light = normalize({cfg.light_dir[0], cfg.light_dir[1], cfg.light_dir[2]});
  const Rgb water_deep = {0.06f, 0.15f, 0.32f};

  Image img(static_cast<std::size_t>(3) * res * res, 0.0f);
  if (aux) {
    aux->hit.assign(static_cast<std::size_t>(res) * res, 0);
    aux->distance.assign(static_cast<std::size_t>(res) * res, 0.0f);
  }

  for (int row = 0; row < res; ++row) {
    for (int col = 0; col < res; ++col) {
      const double py = (1.0 - 2.0 * (row + 0.5) / res) * tan_half;
      const double px = (2.0 * (col + 0.5) / res - 1.0) * tan_half;
      Vec3 dir = normalize({fwd.x + px * right.x + py * up.x, fwd.y + px * right.y + py * up.y,
                            fwd.z + px * right.z + py * up.z});

      // DDA voxel traversal
      int vx = bx, vy = by, vz = bz;
      const int sx = dir.x > 0 ? 1 : -1, sy = dir.y > 0 ? 1 : -1, sz = dir.z > 0 ? 1 : -1;
      const double inf = 1e30;
      const double tdx = dir.x != 0 ? std::abs(1.0 / dir.x) : inf;
      const double tdy = dir.y != 0 ? std::abs(1.0 / dir.y) : inf;
      const double tdz = dir.z != 0 ? std::abs(1.0 / dir.z) : inf;
      double tmx = dir.x != 0
                       ? (dir.x > 0 ? (vx + 1.0 - p.x) : (p.x - vx)) * tdx
                       : inf;
      double tmy = dir.y != 0
                       ? (dir.y > 0 ? (vy + 1.0 - p.y) : (p.y - vy)) * tdy
                       : inf;
      double tmz = dir.z != 0
                       ? (dir.z > 0 ? (vz + 1.0 - p.z) : (p.z - vz)) * tdz
                       : inf;

      double dist = 0.0;
      int hit_axis = -1;
      Block hit_block = Block::Air;
      while (true) {
        if (tmx <= tmy && tmx <= tmz) {
          dist = tmx;
          tmx += tdx;
          vx += sx;
          hit_axis = 0;
        } else if (tmy <= tmz) {
          dist = tmy;
          tmy += tdy;
          vy += sy;
          hit_axis = 1;
        } else {
          dist = tmz;
          tmz += tdz;
          vz += sz;
          hit_axis = 2;
        }
        if (dist > cfg.max_ray_distance) {
          hit_block = Block::Air;
          break;
        }
        Block b = world.block(vx, vy, vz);
        if (b != Block::Air && !(underwater && b == Block::Water)) {
          hit_block = b;
          break;
        }
        // rays leaving the world upward can stop early
        if (vz >= wp.max_height && dir.z > 0) break;
      }

      Rgb color;
      bool hit = hit_block != Block::Air;
      if (hit) {
        Rgb base = block_color(hit_block);
        Vec3 n = {0, 0, 0};
        if (hit_axis == 0) n.x = -static_cast<double>(sx);
        else if (hit_axis == 1) n.y = -static_cast<double>(sy);
        else n.z = -static_cast<double>(sz);
        double diffuse = std::max(0.0, n.x * light.x + n.y * light.y + n.z * light.z);
        double shade = 0.35 + 0.65 * diffuse;
        Rgb sky = sky_color(wp, dir);
        double fog =
            std::clamp((dist - cfg.fog_start) / (cfg.fog_end - cfg.fog_start), 0.0, 1.0);
        for (int i = 0; i < 3; ++i)
          color[i] = static_cast<float>(base[i] * shade * (1.0 - fog) + sky[i] * fog);
      } else {
        color = sky_color(wp, dir);
        dist = cfg.max_ray_distance;
      }
      if (underwater) {
        double murk = std::clamp(0.25 + dist / 8.0, 0.0, 1.0);
        for (int i = 0; i < 3; ++i)
          color[i] = static_cast<float>(color[i] * (1.0 - murk) + water_deep[i] * murk);
      }

      const std::size_t pix = static_cast<std::size_t>(row) * res + col;
      for (int i = 0; i < 3; ++i)
        img[static_cast<std::size_t>(i) * res * res + pix] = std::clamp(color[i], 0.0f, 1.0f);
      if (aux) {
        aux->hit[pix] = hit ? 1 : 0;
        aux->distance[pix] = static_cast<float>(dist);
      }
    }
  }
  return img;
}

namespace {

// standing room above the surface: neither tree trunks nor canopy
bool column_clear(const VoxelWorld& world, int x, int y) {
  int h = world.surface_height(x, y);
  return !world.is_solid(world.block(x, y, h)) && !world.is_solid(world.block(x, y, h + 1));
}

}  // namespace

Episode random_walk_episode(const VoxelWorld& world, std::uint64_t walk_seed,
                            const RenderConfig& render_cfg, const WalkParams& walk) {
  render_cfg.validate();
  const WorldParams& wp = world.params();
  Rng rng(derive_seed(walk_seed, "walk", world.seed()));

  // spawn far enough from the edge that the bounded walk stays in the world
  int margin = static_cast<int>(std::ceil(walk.exploration_radius)) + 2;
  int lo = margin, hi = wp.extent - margin;
  if (hi <= lo)
    throw std::invalid_argument("random_walk: world extent too small for exploration radius");
  int sx = -1, sy = -1;
  for (int attempt = 0; attempt < 4096; ++attempt) {
    int cx = lo + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(hi - lo)));
    int cy = lo + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(hi - lo)));
    if (world.spawnable_column(cx, cy) && column_clear(world, cx, cy)) {
      sx = cx;
      sy = cy;
      break;
    }
  }
  if (sx < 0) throw unspawnable_world_error("random_walk: no spawnable column found");

  double x = sx + 0.5, y = sy + 0.5;
  const double x0 = x, y0 = y;
  double yaw = rng.uniform(-180.0, 180.0);
  double pitch = rng.uniform(-5.0, 15.0);

  Episode ep;
  ep.world_seed = world.seed();
  ep.frames.reserve(walk.steps);

  for (int step = 0; step < walk.steps; ++step) {
    // small random rotation, then walk forward
    yaw = wrap_yaw(yaw + rng.normal(0.0, walk.yaw_sigma_deg));
    if (rng.uniform() < walk.big_rotation_prob) {
      yaw = wrap_yaw(yaw + rng.uniform(-walk.big_rotation_max_deg, walk.big_rotation_max_deg));
      ep.stats.big_rotations += 1;
    }
    pitch = clamp_pitch(pitch + rng.normal(0.0, walk.pitch_sigma_deg));

    double yr = yaw * kPi / 180.0;
    double nx = x + std::cos(yr) * walk.step_length;
    double ny = y + std::sin(yr) * walk.step_length;

    int cur_h = world.surface_height(static_cast<int>(std::floor(x)),
                                     static_cast<int>(std::floor(y)));
    int new_h = world.surface_height(static_cast<int>(std::floor(nx)),
                                     static_cast<int>(std::floor(ny)));
    double r2 = (nx - x0) * (nx - x0) + (ny - y0) * (ny - y0);
    bool out_of_range = r2 > walk.exploration_radius * walk.exploration_radius;
    bool tree_blocked =
        !column_clear(world, static_cast<int>(std::floor(nx)), static_cast<int>(std::floor(ny)));
    int rise = new_h - cur_h;

    if (out_of_range || rise > 1 || tree_blocked) {
      // blocked: jump cannot clear it, make a bigger rotation instead
      yaw = wrap_yaw(yaw + rng.uniform(-walk.big_rotation_max_deg, walk.big_rotation_max_deg));
      ep.stats.blocked += 1;
    } else {
      if (rise == 1) ep.stats.jumps += 1;
      x = nx;
      y = ny;
    }

    int h = world.surface_height(static_cast<int>(std::floor(x)),
                                 static_cast<int>(std::floor(y)));
    CameraPose pose;
    pose.x = x;
    pose.y = y;
    pose.z = h + walk.eye_height;
    pose.yaw = yaw;
    pose.pitch = pitch;
    pose = pose.canonical();

    Frame f;
    f.pose = pose;
    f.image = render_frame(world, pose, render_cfg);
    ep.frames.push_back(std::move(f));
  }
  return ep;
}

bool episode_valid(const Episode& episode, const PruneThresholds& thresholds) {
  if (episode.frames.empty()) return false;
  const auto& frames = episode.frames;

  double max_d2 = 0.0;
  for (std::size_t i = 0; i < frames.size(); ++i)
    for (std::size_t j = i + 1; j < frames.size(); ++j) {
      double dx = frames[i].pose.x - frames[j].pose.x;
      double dy = frames[i].pose.y - frames[j].pose.y;
      max_d2 = std::max(max_d2, dx * dx + dy * dy);
    }
  if (max_d2 < thresholds.min_displacement * thresholds.min_displacement) return false;

  // mean per-pixel variance across frames, rejects "all images look the same"
  const std::size_t n = frames[0].image.size();
  const double count = static_cast<double>(frames.size());
  double var_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0, s2 = 0.0;
    for (const Frame& f : frames) {
      double v = f.image[i];
      s += v;
      s2 += v * v;
    }
    double mean = s / count;
    var_sum += std::max(0.0, s2 / count - mean * mean);
  }
  double mean_var = var_sum / static_cast<double>(n);
  return mean_var >= thresholds.min_pixel_variance;
}

Episode normalize_episode_poses(const Episode& episode, double xy_scale, double z_scale) {
  Episode out = episode;
  if (episode.frames.empty()) return out;
  PoseNormalization norm;
  norm.xy_scale = xy_scale;
  norm.z_scale = z_scale;
  double n = static_cast<double>(episode.frames.size());
  for (const Frame& f : episode.frames) {
    norm.cx += f.pose.x / n;
    norm.cy += f.pose.y / n;
    norm.cz += f.pose.z / n;
  }
  for (Frame& f : out.frames) f.pose = norm.apply(f.pose);
  out.normalization = norm;
  out.normalized = true;
  return out;
}

}  // namespace voxloc
