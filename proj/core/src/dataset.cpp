#include "voxloc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "voxloc/rng.hpp"

namespace voxloc {

namespace {

constexpr char kMagic[4] = {'V', 'X', 'E', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw dataset_error("dataset: truncated file (header)");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

float get_f32(std::istream& is) {
  std::uint32_t u = get_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

std::uint8_t quantize(float v) {
  float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

void write_dataset(const std::vector<Episode>& episodes, const std::string& path) {
  int res = -1;
  std::size_t frames = 0;
  for (const Episode& ep : episodes) {
    if (!ep.valid) throw dataset_error("dataset: refusing to write invalid episode");
    if (ep.frames.empty()) throw dataset_error("dataset: empty episode");
    std::size_t px = ep.frames[0].image.size() / 3;
    int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(px))));
    if (res < 0) {
      res = r;
      frames = ep.frames.size();
    } else if (r != res) {
      throw dataset_error("dataset: resolution mismatch between episodes (" + std::to_string(r) +
                          " vs " + std::to_string(res) + ")");
    } else if (ep.frames.size() != frames) {
      throw dataset_error("dataset: frame count mismatch between episodes");
    }
  }
  if (res < 0) res = 32;  // header defaults for an empty dataset
  if (frames == 0) frames = 100;

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw dataset_error("dataset: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(res));
  put_u32(os, static_cast<std::uint32_t>(frames));
  put_u32(os, static_cast<std::uint32_t>(episodes.size()));
  put_u32(os, 5);

  std::vector<std::uint8_t> pixel_buf(static_cast<std::size_t>(res) * res * 3);
  for (const Episode& ep : episodes) {
    for (const Frame& f : ep.frames) {
      put_f32(os, static_cast<float>(f.pose.x));
      put_f32(os, static_cast<float>(f.pose.y));
      put_f32(os, static_cast<float>(f.pose.z));
      put_f32(os, static_cast<float>(f.pose.yaw));
      put_f32(os, static_cast<float>(f.pose.pitch));
      // planar CHW floats -> interleaved HWC bytes
      const std::size_t hw = static_cast<std::size_t>(res) * res;
      for (std::size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c) pixel_buf[p * 3 + c] = quantize(f.image[c * hw + p]);
      os.write(reinterpret_cast<const char*>(pixel_buf.data()),
               static_cast<std::streamsize>(pixel_buf.size()));
    }
  }
  if (!os) throw dataset_error("dataset: short write to '" + path + "'");
}

DatasetHeader read_dataset_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw dataset_error("dataset: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw dataset_error("dataset: bad magic in '" + path + "'");
  DatasetHeader h;
  h.version = get_u32(is);
  if (h.version != kVersion)
    throw dataset_error("dataset: version " + std::to_string(h.version) + " unsupported (expect " +
                        std::to_string(kVersion) + ")");
  h.resolution = get_u32(is);
  h.frames_per_episode = get_u32(is);
  h.episode_count = get_u32(is);
  h.pose_dim = get_u32(is);
  if (h.pose_dim != 5)
    throw dataset_error("dataset: pose dimension " + std::to_string(h.pose_dim) + " unsupported");
  return h;
}

std::vector<Episode> read_dataset(const std::string& path) {
  DatasetHeader h = read_dataset_header(path);
  std::ifstream is(path, std::ios::binary);
  is.seekg(24);

  // consistency of counts with the file length
  is.seekg(0, std::ios::end);
  std::uint64_t size = static_cast<std::uint64_t>(is.tellg());
  const std::uint64_t frame_bytes =
      20 + static_cast<std::uint64_t>(h.resolution) * h.resolution * 3;
  const std::uint64_t expect =
      24 + static_cast<std::uint64_t>(h.episode_count) * h.frames_per_episode * frame_bytes;
  if (size != expect)
    throw dataset_error("dataset: truncated file '" + path + "' (" + std::to_string(size) +
                        " bytes, expected " + std::to_string(expect) + ")");
  is.seekg(24);

  std::vector<Episode> episodes;
  episodes.reserve(h.episode_count);
  const std::size_t hw = static_cast<std::size_t>(h.resolution) * h.resolution;
  std::vector<std::uint8_t> pixel_buf(hw * 3);
  for (std::uint32_t e = 0; e < h.episode_count; ++e) {
    Episode ep;
    ep.valid = true;
    ep.normalized = true;
    ep.frames.reserve(h.frames_per_episode);
    for (std::uint32_t i = 0; i < h.frames_per_episode; ++i) {
      Frame f;
      f.pose.x = get_f32(is);
      f.pose.y = get_f32(is);
      f.pose.z = get_f32(is);
      f.pose.yaw = get_f32(is);
      f.pose.pitch = get_f32(is);
      is.read(reinterpret_cast<char*>(pixel_buf.data()),
              static_cast<std::streamsize>(pixel_buf.size()));
      if (!is) throw dataset_error("dataset: truncated file '" + path + "'");
      f.image.resize(hw * 3);
      for (std::size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c)
          f.image[c * hw + p] = static_cast<float>(pixel_buf[p * 3 + c]) / 255.0f;
      ep.frames.push_back(std::move(f));
    }
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

std::vector<int> sample_task_indices(int episode_length, int context_size, std::uint64_t seed) {
  if (context_size < 1 || context_size + 1 > episode_length)
    throw std::invalid_argument("sample_task: context size " + std::to_string(context_size) +
                                " needs " + std::to_string(context_size + 1) +
                                " frames, episode has " + std::to_string(episode_length));
  std::vector<int> pool(episode_length);
  for (int i = 0; i < episode_length; ++i) pool[i] = i;
  Rng rng(derive_seed(seed, "task"));
  // partial Fisher-Yates; the last drawn index becomes the target
  std::vector<int> out;
  out.reserve(context_size + 1);
  for (int k = 0; k < context_size + 1; ++k) {
    std::size_t j = k + rng.uniform_index(static_cast<std::uint64_t>(episode_length - k));
    std::swap(pool[k], pool[j]);
    out.push_back(pool[k]);
  }
  return out;
}

Task sample_task(const Episode& episode, int context_size, std::uint64_t seed) {
  std::vector<int> picks =
      sample_task_indices(static_cast<int>(episode.frames.size()), context_size, seed);
  Task task;
  task.context_indices.assign(picks.begin(), picks.end() - 1);
  task.target_index = picks.back();
  task.context.reserve(context_size);
  for (int i : task.context_indices) task.context.push_back(episode.frames[i]);
  task.target = episode.frames[task.target_index];
  return task;
}

void SplitManifest::validate() const {
  std::set<std::uint64_t> train(train_seeds.begin(), train_seeds.end());
  for (std::uint64_t s : test_seeds)
    if (train.count(s))
      throw dataset_error("split: seed " + std::to_string(s) + " present in both train and test");
}

void write_split_manifest(const SplitManifest& split, const std::string& path) {
  split.validate();
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw dataset_error("split: cannot open '" + path + "' for writing");
  os << "# voxloc split manifest v1\n";
  for (std::uint64_t s : split.train_seeds) os << "train " << s << "\n";
  for (std::uint64_t s : split.test_seeds) os << "test " << s << "\n";
}

SplitManifest read_split_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw dataset_error("split: cannot open '" + path + "'");
  SplitManifest split;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string kind;
    std::uint64_t seed;
    ss >> kind >> seed;
    if (kind == "train")
      split.train_seeds.push_back(seed);
    else if (kind == "test")
      split.test_seeds.push_back(seed);
    else
      throw dataset_error("split: unknown entry '" + kind + "'");
  }
  split.validate();
  return split;
}

}  // namespace voxloc
