#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "voxloc/dataset.hpp"
#include "voxloc/rng.hpp"

using namespace voxloc;

namespace {

Episode synthetic_episode(std::uint64_t seed, int frames = 10, int res = 8) {
  Rng rng(seed);
  Episode ep;
  ep.world_seed = seed;
  ep.valid = true;
  for (int i = 0; i < frames; ++i) {
    Frame f;
    f.pose.x = rng.uniform(-1, 1);
    f.pose.y = rng.uniform(-1, 1);
    f.pose.z = rng.uniform(-0.5, 0.5);
    f.pose.yaw = rng.uniform(-180, 180);
    f.pose.pitch = rng.uniform(-20, 29);
    f.image.resize(static_cast<std::size_t>(3) * res * res);
    for (auto& v : f.image) v = static_cast<float>(rng.uniform());
    ep.frames.push_back(std::move(f));
  }
  return ep;
}

std::filesystem::path tmp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST(Dataset, RoundTrip) {
  std::vector<Episode> eps = {synthetic_episode(1), synthetic_episode(2), synthetic_episode(3)};
  auto path = tmp_file("voxloc_ds_roundtrip.bin");
  write_dataset(eps, path.string());

  auto loaded = read_dataset(path.string());
  ASSERT_EQ(loaded.size(), 3u);
  for (std::size_t e = 0; e < eps.size(); ++e) {
    ASSERT_EQ(loaded[e].frames.size(), eps[e].frames.size());
    for (std::size_t i = 0; i < eps[e].frames.size(); ++i) {
      const Frame& a = eps[e].frames[i];
      const Frame& b = loaded[e].frames[i];
      // poses survive as exact f32
      EXPECT_EQ(static_cast<float>(a.pose.x), static_cast<float>(b.pose.x));
      EXPECT_EQ(static_cast<float>(a.pose.yaw), static_cast<float>(b.pose.yaw));
      EXPECT_NEAR(a.pose.x, b.pose.x, 1e-6);
      EXPECT_NEAR(a.pose.pitch, b.pose.pitch, 1e-4);
      // images: both sides quantized to the same 8-bit levels
      for (std::size_t p = 0; p < a.image.size(); ++p) {
        float qa = std::round(std::clamp(a.image[p], 0.0f, 1.0f) * 255.0f) / 255.0f;
        EXPECT_FLOAT_EQ(qa, b.image[p]);
      }
    }
  }

  // writing the loaded episodes again reproduces the bytes exactly
  auto path2 = tmp_file("voxloc_ds_roundtrip2.bin");
  write_dataset(loaded, path2.string());
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(b1, b2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(Dataset, TruncatedFileFails) {
  std::vector<Episode> eps = {synthetic_episode(4)};
  auto path = tmp_file("voxloc_ds_trunc.bin");
  write_dataset(eps, path.string());
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  try {
    read_dataset(path.string());
    FAIL() << "expected dataset_error";
  } catch (const dataset_error& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Dataset, EmptyDatasetIsFine) {
  auto path = tmp_file("voxloc_ds_empty.bin");
  write_dataset({}, path.string());
  auto header = read_dataset_header(path.string());
  EXPECT_EQ(header.episode_count, 0u);
  EXPECT_TRUE(read_dataset(path.string()).empty());
  std::filesystem::remove(path);
}

TEST(Dataset, VersionMismatchFails) {
  std::vector<Episode> eps = {synthetic_episode(5)};
  auto path = tmp_file("voxloc_ds_version.bin");
  write_dataset(eps, path.string());
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    char bad = 9;
    f.write(&bad, 1);
  }
  EXPECT_THROW(read_dataset(path.string()), dataset_error);
  std::filesystem::remove(path);
}

TEST(Dataset, MixedResolutionRejected) {
  std::vector<Episode> eps = {synthetic_episode(6, 4, 8), synthetic_episode(7, 4, 16)};
  auto path = tmp_file("voxloc_ds_mixres.bin");
  EXPECT_THROW(write_dataset(eps, path.string()), dataset_error);
}

TEST(Dataset, InvalidEpisodeRejected) {
  Episode ep = synthetic_episode(8);
  ep.valid = false;
  EXPECT_THROW(write_dataset({ep}, tmp_file("voxloc_ds_inv.bin").string()), dataset_error);
}

TEST(Task, TwentyPlusOneDistinct) {
  Episode ep = synthetic_episode(11, 100, 8);
  Task t = sample_task(ep, 20, 42);
  EXPECT_EQ(t.context.size(), 20u);
  std::set<int> seen(t.context_indices.begin(), t.context_indices.end());
  EXPECT_EQ(seen.size(), 20u);
  EXPECT_EQ(seen.count(t.target_index), 0u);
}

TEST(Task, AllButOneBoundary) {
  Episode ep = synthetic_episode(12, 100, 8);
  Task t = sample_task(ep, 99, 43);
  EXPECT_EQ(t.context.size(), 99u);
  std::set<int> all(t.context_indices.begin(), t.context_indices.end());
  all.insert(t.target_index);
  EXPECT_EQ(all.size(), 100u);
}

TEST(Task, ContextSizeTooLargeFails) {
  Episode ep = synthetic_episode(13, 100, 8);
  EXPECT_THROW(sample_task(ep, 100, 1), std::invalid_argument);
  EXPECT_THROW(sample_task(ep, 120, 1), std::invalid_argument);
}

TEST(Task, DeterministicGivenSeed) {
  Episode ep = synthetic_episode(14, 100, 8);
  Task a = sample_task(ep, 20, 77);
  Task b = sample_task(ep, 20, 77);
  EXPECT_EQ(a.target_index, b.target_index);
  EXPECT_EQ(a.context_indices, b.context_indices);
  Task c = sample_task(ep, 20, 78);
  EXPECT_NE(a.context_indices, c.context_indices);
}

TEST(Task, TargetFrequencyUniform) {
  const int n = 20000;
  std::vector<int> counts(100, 0);
  for (int i = 0; i < n; ++i) {
    auto picks = sample_task_indices(100, 20, 9000 + i);
    counts[picks.back()] += 1;
  }
  // binomial 3-sigma bound around p = 1/100
  double p = 0.01;
  double sigma = std::sqrt(p * (1 - p) / n);
  for (int i = 0; i < 100; ++i) {
    double freq = static_cast<double>(counts[i]) / n;
    EXPECT_NEAR(freq, p, 3 * sigma) << "index " << i;
  }
}

TEST(Split, DisjointnessEnforced) {
  SplitManifest split;
  split.train_seeds = {1, 2, 3};
  split.test_seeds = {4, 5};
  EXPECT_NO_THROW(split.validate());
  split.test_seeds.push_back(2);
  EXPECT_THROW(split.validate(), dataset_error);
}

TEST(Split, ManifestRoundTrip) {
  SplitManifest split;
  split.train_seeds = {10, 20, 30};
  split.test_seeds = {40, 50};
  auto path = tmp_file("voxloc_split.txt");
  write_split_manifest(split, path.string());
  SplitManifest back = read_split_manifest(path.string());
  EXPECT_EQ(back.train_seeds, split.train_seeds);
  EXPECT_EQ(back.test_seeds, split.test_seeds);
  std::filesystem::remove(path);
}
