#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "xwd/error.hpp"
#include "xwd/volume_io.hpp"
#include "xwd/windowing.hpp"

using namespace xwd;

namespace {

WindowedStack stack_of(const std::string& id, std::vector<double> values) {
  WindowedStack s;
  s.patient_id = id;
  Tensor t = Tensor::volume(1, 1, values.size());
  for (std::size_t i = 0; i < values.size(); ++i) t.at(0, 0, i) = values[i];
  s.arrays["lung"] = t;
  return s;
}

}  // namespace

TEST(Windowing, Examples) {
  const WindowSpec lung{"lung", 1500, -600};
  const WindowSpec med{"mediastinal", 350, 20};
  EXPECT_DOUBLE_EQ(apply_window(-600, lung), 0.5);
  EXPECT_DOUBLE_EQ(apply_window(-2000, lung), 0.0);
  EXPECT_NEAR(apply_window(100, med), 255.0 / 350.0, 1e-15);
  EXPECT_EQ(apply_window(lung.lower(), lung), 0.0);
  EXPECT_EQ(apply_window(lung.upper(), lung), 1.0);
}

TEST(Windowing, MonotoneAndBounded) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> hu(-3000, 4000), width(1, 3000), level(-1200, 1200);
  for (int i = 0; i < 2000; ++i) {
    const WindowSpec w{"w", width(rng), level(rng)};
    double a = hu(rng), b = hu(rng);
    if (a > b) std::swap(a, b);
    const double fa = apply_window(a, w), fb = apply_window(b, w);
    EXPECT_LE(fa, fb);
    EXPECT_GE(fa, 0.0);
    EXPECT_LE(fb, 1.0);
  }
}

TEST(Windowing, DefaultSets) {
  const WindowSet d = default_window_set(TaskMode::kDiffuse);
  EXPECT_EQ(d.names(), (std::vector<std::string>{"lung", "mediastinal", "hrct", "zero", "bone"}));
  EXPECT_EQ(d.at("bone").width_hu, 1000);
  EXPECT_EQ(d.at("bone").level_hu, 250);
  const WindowSet f = default_window_set(TaskMode::kFocal);
  EXPECT_EQ(f.size(), 5u);
  EXPECT_FALSE(f.contains("bone"));
  EXPECT_EQ(f.at("pe").width_hu, 700);
  EXPECT_EQ(f.at("pe").level_hu, 100);
  EXPECT_EQ(f.at("lung").level_hu, -600);
}

TEST(Windowing, WindowSetValidation) {
  EXPECT_THROW(WindowSet({{"a", 1, 0}}), Error);
  EXPECT_THROW(WindowSet({{"a", 1, 0}, {"a", 2, 0}}), Error);
  EXPECT_THROW(WindowSet({{"a", 0, 0}, {"b", 2, 0}}), Error);
  const WindowSet ws({{"a", 1, 0}, {"b", 2, 0}});
  EXPECT_EQ(ws.index_of("b"), 1u);
  try {
    ws.index_of("c");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kWindowSetMismatch);
  }
}

TEST(Windowing, NormStats) {
  std::vector<WindowedStack> stacks = {stack_of("a", {0.5, 0.5, 0.5})};
  TrainPartition train{{&stacks[0]}};
  auto s = fit_norm_stats(train, "lung");
  EXPECT_DOUBLE_EQ(s.mean, 0.5);
  EXPECT_DOUBLE_EQ(s.stddev, 0.0);
  const auto z = normalize(stacks[0], {{"lung", s}});
  for (double v : z.arrays.at("lung").data()) EXPECT_EQ(v, 0.0);

  stacks = {stack_of("a", {0.0, 1.0, 0.0, 1.0})};
  train = {{&stacks[0]}};
  s = fit_norm_stats(train, "lung");
  EXPECT_DOUBLE_EQ(s.mean, 0.5);
  EXPECT_DOUBLE_EQ(s.stddev, 0.5);
  const auto n = normalize(stacks[0], {{"lung", s}});
  EXPECT_NEAR(n.arrays.at("lung").at(0, 0, 1), 0.5 / (0.5 + 1e-8), 1e-15);

  EXPECT_THROW(fit_norm_stats(TrainPartition{}, "lung"), Error);
}

TEST(Windowing, PooledStatsEqualConcatenation) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> a(37), b(91), all;
  for (auto& v : a) v = u(rng);
  for (auto& v : b) v = u(rng);
  all = a;
  all.insert(all.end(), b.begin(), b.end());
  std::vector<WindowedStack> parts = {stack_of("a", a), stack_of("b", b)};
  std::vector<WindowedStack> joined = {stack_of("ab", all)};
  const auto s1 = fit_norm_stats(TrainPartition{{&parts[0], &parts[1]}}, "lung");
  const auto s2 = fit_norm_stats(TrainPartition{{&joined[0]}}, "lung");
  EXPECT_NEAR(s1.mean, s2.mean, 1e-14);
  EXPECT_NEAR(s1.stddev, s2.stddev, 1e-14);

  // brute-force population statistics
  double mean = 0;
  for (double v : all) mean += v;
  mean /= all.size();
  double var = 0;
  for (double v : all) var += (v - mean) * (v - mean);
  EXPECT_NEAR(s1.mean, mean, 1e-14);
  EXPECT_NEAR(s1.stddev, std::sqrt(var / all.size()), 1e-14);

  // normalized training pool: mean 0, stddev sigma / (sigma + eps)
  std::vector<double> z;
  for (const auto& p : parts) {
    const WindowedStack n = normalize(p, {{"lung", s1}});
    for (double v : n.arrays.at("lung").data()) z.push_back(v);
  }
  double zm = 0;
  for (double v : z) zm += v;
  zm /= z.size();
  double zv = 0;
  for (double v : z) zv += (v - zm) * (v - zm);
  EXPECT_LT(std::abs(zm), 1e-5);
  EXPECT_NEAR(std::sqrt(zv / z.size()), s1.stddev / (s1.stddev + 1e-8), 1e-9);

  // inverse
  const auto n = normalize(parts[0], {{"lung", s1}});
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(n.arrays.at("lung").data()[i] * (s1.stddev + 1e-8) + s1.mean, a[i], 1e-6);
  }
}

TEST(Windowing, StackSharesShape) {
  HUVolume v;
  v.patient_id = "x";
  v.label = 1;
  v.voxels = test::random_volume(3, 4, 5, 2);
  for (auto& x : v.voxels.data()) x *= 800;
  const auto s = make_windowed_stack(v, default_window_set(TaskMode::kDiffuse));
  EXPECT_EQ(s.arrays.size(), 5u);
  for (const auto& [name, arr] : s.arrays) {
    EXPECT_EQ(arr.depth(), 3u);
    EXPECT_EQ(arr.height(), 4u);
    EXPECT_EQ(arr.width(), 5u);
    for (double x : arr.data()) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(VolumeIo, RoundTripAndHeader) {
  test::TempDir dir;
  Tensor t = test::random_volume(3, 4, 5, 1);
  write_vol(dir / "a.vol", t);
  EXPECT_EQ(std::filesystem::file_size(dir / "a.vol"), 16u + 4u * 60u);
  const Tensor r = read_vol(dir / "a.vol");
  ASSERT_EQ(r.depth(), 3u);
  for (std::size_t i = 0; i < 60; ++i) EXPECT_EQ(r.data()[i], static_cast<double>(static_cast<float>(t.data()[i])));
}
