#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "voxloc/checkpoint.hpp"
#include "voxloc/params.hpp"
#include "voxloc/rng.hpp"

using namespace voxloc;

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  ParamStore<double> params;
  Rng rng(1);
  params.add_init("w", Shape::mat(3, 3), 3, rng);
  Tensor<double> before = params[0].value;
  std::vector<Tensor<double>> grads{Tensor<double>::zeros(Shape::mat(3, 3))};
  std::int64_t step = 0;
  adam_update(params, grads, step, AdamConfig{});
  for (std::size_t i = 0; i < before.numel(); ++i)
    EXPECT_DOUBLE_EQ(params[0].value[i], before[i]);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
  ParamStore<double> params;
  params.add("w", Tensor<double>::scalar(0.0));
  std::vector<Tensor<double>> grads{Tensor<double>::scalar(3.7)};
  AdamConfig cfg;
  cfg.lr = 1e-3;
  std::int64_t step = 0;
  double prev = 0.0;
  double last_delta = 0.0;
  for (int i = 0; i < 200; ++i) {
    adam_update(params, grads, step, cfg);
    last_delta = std::abs(params[0].value[0] - prev);
    prev = params[0].value[0];
  }
  // bias-corrected Adam with a constant gradient converges to steps of lr
  EXPECT_NEAR(last_delta, cfg.lr, 1e-5);
}

TEST(Adam, QuadraticBowl) {
  // f(w) = w^2, df/dw = 2w, 500 steps at lr 0.05 from w0 = 1
  ParamStore<double> params;
  params.add("w", Tensor<double>::scalar(1.0));
  AdamConfig cfg;
  cfg.lr = 0.05;
  std::int64_t step = 0;
  for (int i = 0; i < 500; ++i) {
    std::vector<Tensor<double>> grads{Tensor<double>::scalar(2.0 * params[0].value[0])};
    adam_update(params, grads, step, cfg);
  }
  EXPECT_LT(std::abs(params[0].value[0]), 1e-2);
}

TEST(Adam, NanGradientNamedInCheckedMode) {
  ParamStore<double> params;
  params.add("conv1.weight", Tensor<double>::scalar(0.0));
  std::vector<Tensor<double>> grads{Tensor<double>::scalar(std::nan(""))};
  std::int64_t step = 0;
  try {
    adam_update(params, grads, step, AdamConfig{}, /*checked=*/true);
    FAIL() << "expected numeric_error";
  } catch (const numeric_error& e) {
    EXPECT_NE(std::string(e.what()).find("conv1.weight"), std::string::npos);
  }
}

TEST(Rng, DeterministicStreams) {
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(99), d(100);
  EXPECT_NE(c.next_u64(), d.next_u64());
}

TEST(Rng, DerivedSeedsSeparateStreams) {
  EXPECT_NE(derive_seed(1, "world", 0), derive_seed(1, "walk", 0));
  EXPECT_NE(derive_seed(1, "world", 0), derive_seed(1, "world", 1));
  EXPECT_EQ(derive_seed(1, "world", 5), derive_seed(1, "world", 5));
}

TEST(Rng, NormalMoments) {
  Rng rng(7);
  const int n = 50000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.03);
}

TEST(Checkpoint, RoundTripWithAdamState) {
  ParamStore<float> params;
  Rng rng(5);
  params.add_init("enc.w", Shape::nchw(4, 3, 2, 2), 12, rng);
  params.add_init("enc.b", Shape::vec(4), 4, rng);
  params[0].m.fill(0.25f);
  params[1].v.fill(0.5f);

  CheckpointData data;
  data.config_json = "{\"direction\":\"generative\"}";
  data.step = 777;
  data.params = params;

  auto path = std::filesystem::temp_directory_path() / "voxloc_ckpt_test.bin";
  save_checkpoint(path.string(), data);
  CheckpointData loaded = load_checkpoint(path.string());

  EXPECT_EQ(loaded.step, 777);
  EXPECT_EQ(loaded.config_json, data.config_json);
  ASSERT_EQ(loaded.params.size(), 2);
  EXPECT_EQ(loaded.params[0].name, "enc.w");
  EXPECT_EQ(loaded.params[0].value.shape(), Shape::nchw(4, 3, 2, 2));
  for (std::size_t i = 0; i < params[0].value.numel(); ++i) {
    EXPECT_EQ(loaded.params[0].value[i], params[0].value[i]);
    EXPECT_EQ(loaded.params[0].m[i], 0.25f);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileFails) {
  ParamStore<float> params;
  Rng rng(5);
  params.add_init("w", Shape::mat(8, 8), 8, rng);
  CheckpointData data;
  data.params = params;
  auto path = std::filesystem::temp_directory_path() / "voxloc_ckpt_trunc.bin";
  save_checkpoint(path.string(), data);
  auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 1);
  EXPECT_THROW(load_checkpoint(path.string()), std::runtime_error);
  std::filesystem::remove(path);
}
