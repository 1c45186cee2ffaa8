#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "test_util.hpp"
#include "xwd/error.hpp"
#include "xwd/ingestion.hpp"

using namespace xwd;

namespace {

RawSeries make_series(std::vector<double> positions, std::size_t rows = 4, std::size_t cols = 3) {
  RawSeries s;
  s.patient_id = "p1";
  s.label = 1;
  s.rescale_slope = 1.0;
  s.rescale_intercept = -1024.0;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    RawSlice sl;
    sl.rows = rows;
    sl.cols = cols;
    sl.position = positions[i];
    sl.pixels.assign(rows * cols, static_cast<std::int32_t>(100 * i));
    s.slices.push_back(sl);
  }
  return s;
}

void expect_error(ErrorKind kind, const std::function<void()>& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

// Stride rule written from the prose: trim, start at a fraction of the kept
// range, grow one slice at a time (right, then left) while short and room
// remains, then index_k = start + floor(k * m / T).
std::vector<std::size_t> oracle_indices(std::size_t n, double trim_f, double start_f, std::size_t t) {
  const std::size_t trim = static_cast<std::size_t>(std::floor(trim_f * static_cast<double>(n)));
  const std::size_t kept = n - 2 * trim;
  long lo = static_cast<long>(std::floor(start_f * static_cast<double>(kept)));
  long hi = static_cast<long>(kept);  // exclusive
  bool right_turn = true;
  while (hi - lo < static_cast<long>(t) && (lo > 0 || hi < static_cast<long>(kept))) {
    if (right_turn && hi < static_cast<long>(kept)) ++hi;
    else if (!right_turn && lo > 0) --lo;
    else if (hi < static_cast<long>(kept)) ++hi;
    else --lo;
    right_turn = !right_turn;
  }
  const std::size_t m = static_cast<std::size_t>(hi - lo);
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < t; ++k) out.push_back(trim + static_cast<std::size_t>(lo) + k * m / t);
  return out;
}

double bilinear_oracle(const std::vector<double>& img, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  auto at = [&](std::size_t r, std::size_t c) { return img[r * w + c]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

TEST(Ingestion, ToHuAffine) {
  RawSeries s = make_series({0, 1, 2}, 1, 3);
  s.slices[0].pixels = {1000, 0, 512};
  HUVolume v = to_hu(s);
  EXPECT_DOUBLE_EQ(v.voxels.at(0, 0, 0), -24.0);
  EXPECT_DOUBLE_EQ(v.voxels.at(0, 0, 1), -1024.0);
  s.rescale_slope = 2.0;
  v = to_hu(s);
  EXPECT_DOUBLE_EQ(v.voxels.at(0, 0, 2), 0.0);
  EXPECT_DOUBLE_EQ(v.voxels.at(0, 0, 1), -1024.0);
}

TEST(Ingestion, OrientSortsAndIsIdempotent) {
  const RawSeries s = orient(make_series({30, 10, 20}));
  ASSERT_EQ(s.slices.size(), 3u);
  EXPECT_EQ(s.slices[0].position, 10);
  EXPECT_EQ(s.slices[1].position, 20);
  EXPECT_EQ(s.slices[2].position, 30);
  EXPECT_EQ(s.slices[0].pixels[0], 100);  // slice content travels with its position
  const RawSeries twice = orient(s);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(twice.slices[i].position, s.slices[i].position);
  expect_error(ErrorKind::kInvalidSeries, [] { orient(make_series({1, 2, 2})); });
}

TEST(Ingestion, SeriesRoundTrip) {
  test::TempDir dir;
  std::vector<double> pos;
  for (int i = 0; i < 100; ++i) pos.push_back(static_cast<double>((i * 37) % 100) * 2.5);
  const RawSeries written = make_series(pos, 5, 6);
  write_series(written, dir.path() / "p");
  const RawSeries read = load_series(dir.path() / "p");
  ASSERT_EQ(read.slices.size(), 100u);
  for (std::size_t i = 1; i < read.slices.size(); ++i) EXPECT_LT(read.slices[i - 1].position, read.slices[i].position);
  const RawSeries expected = orient(written);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(read.slices[i].pixels, expected.slices[i].pixels);
  EXPECT_EQ(read.patient_id, "p1");
  EXPECT_EQ(read.label, 1);
}

TEST(Ingestion, SeriesErrors) {
  test::TempDir dir;
  RawSeries mixed = make_series({0, 1, 2});
  mixed.slices[1].rows = 2;
  mixed.slices[1].pixels.resize(2 * 3);
  write_series(mixed, dir.path() / "mixed");
  expect_error(ErrorKind::kInconsistentShape, [&] { load_series(dir.path() / "mixed"); });

  write_series(make_series({0, 1}), dir.path() / "short");
  expect_error(ErrorKind::kTooFewSlices, [&] { load_series(dir.path() / "short"); });

  write_series(make_series({0, 1, 2}), dir.path() / "meta");
  nlohmann::json j;
  std::ifstream(dir.path() / "meta" / "series.json") >> j;
  j.erase("rescale_slope");
  std::ofstream(dir.path() / "meta" / "series.json") << j.dump();
  expect_error(ErrorKind::kMissingMetadata, [&] { load_series(dir.path() / "meta"); });
}

TEST(Ingestion, SampleIndicesExamples) {
  EXPECT_EQ(sample_indices(10, {TaskMode::kDiffuse, 4, 0.0, 0.10}), (std::vector<std::size_t>{1, 3, 5, 7}));
  std::vector<std::size_t> all(10);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(sample_indices(10, {TaskMode::kDiffuse, 10, 0.0, 0.0}), all);
  const auto dup = sample_indices(5, {TaskMode::kDiffuse, 8, 0.0, 0.0});
  EXPECT_EQ(dup, (std::vector<std::size_t>{0, 0, 1, 1, 2, 3, 3, 4}));
  EXPECT_TRUE(std::is_sorted(dup.begin(), dup.end()));
  expect_error(ErrorKind::kEmptyAfterTrim, [] { sample_indices(0, {TaskMode::kDiffuse, 2, 0.0, 0.1}); });
  expect_error(ErrorKind::kInvalidConfig, [] { sample_indices(9, {TaskMode::kDiffuse, 2, 0.0, 0.5}); });
}

TEST(Ingestion, SampleIndicesMatchOracle) {
  for (std::size_t n = 3; n <= 160; ++n) {
    for (double trim : {0.0, 0.1, 0.2}) {
      for (double start : {0.0, 0.4, 0.75}) {
        for (std::size_t t : {1u, 4u, 8u, 32u}) {
          const std::size_t tr = static_cast<std::size_t>(std::floor(trim * n));
          if (n <= 2 * tr) continue;
          const SamplingPlan plan{TaskMode::kDiffuse, t, start, trim};
          const auto got = sample_indices(n, plan);
          ASSERT_EQ(got, oracle_indices(n, trim, start, t)) << "n=" << n << " trim=" << trim << " start=" << start
                                                            << " T=" << t;
          EXPECT_GE(got.front(), tr);
          EXPECT_LT(got.back(), n - tr);
          const bool enough = (n - 2 * tr) >= t;
          if (enough) {
            EXPECT_TRUE(std::adjacent_find(got.begin(), got.end(), std::greater_equal<>()) == got.end());
          }
        }
      }
    }
  }
}

TEST(Ingestion, PaperDefaultTrimCount) {
  // 100 slices at 10%: slices 0..9 and 90..99 never appear.
  const auto idx = sample_indices(100, SamplingPlan::diffuse());
  EXPECT_EQ(idx.size(), 32u);
  EXPECT_EQ(idx.front(), 10u + 32u);
  EXPECT_LE(idx.back(), 89u);
}

TEST(Ingestion, ResizeBilinear) {
  HUVolume v;
  v.voxels = Tensor::volume(1, 2, 2);
  v.voxels.at(0, 0, 0) = 0;
  v.voxels.at(0, 0, 1) = 1;
  v.voxels.at(0, 1, 0) = 0;
  v.voxels.at(0, 1, 1) = 1;
  const HUVolume out = resize_slices(v, 2, 3);
  EXPECT_DOUBLE_EQ(out.voxels.at(0, 0, 1), 0.5);
  EXPECT_DOUBLE_EQ(out.voxels.at(0, 1, 1), 0.5);

  HUVolume id;
  id.voxels = test::random_volume(2, 5, 7, 3);
  EXPECT_EQ(resize_slices(id, 5, 7).voxels, id.voxels);

  HUVolume c;
  c.voxels = Tensor::volume(2, 3, 4, -321.5);
  const HUVolume r = resize_slices(c, 9, 2);
  for (double x : r.voxels.data()) EXPECT_DOUBLE_EQ(x, -321.5);
}

TEST(Ingestion, ResizeMatchesBruteForceOracle) {
  HUVolume v;
  v.voxels = test::random_volume(2, 6, 5, 11);
  for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{13, 9}, {3, 2}, {6, 11}}) {
    const HUVolume out = resize_slices(v, oh, ow);
    for (std::size_t z = 0; z < 2; ++z) {
      std::vector<double> img(30);
      for (std::size_t i = 0; i < 30; ++i) img[i] = v.voxels.at(z, i / 5, i % 5);
      double lo = *std::min_element(img.begin(), img.end()), hi = *std::max_element(img.begin(), img.end());
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          const double sy = (y + 0.5) * 6.0 / oh - 0.5, sx = (x + 0.5) * 5.0 / ow - 0.5;
          const double got = out.voxels.at(z, y, x);
          EXPECT_NEAR(got, bilinear_oracle(img, 6, 5, sy, sx), 1e-12);
          EXPECT_GE(got, lo - 1e-12);
          EXPECT_LE(got, hi + 1e-12);
        }
      }
    }
  }
}

TEST(Ingestion, PhantomContract) {
  PhantomSpec spec = PhantomSpec::mechanism_default();
  spec.n_patients = 40;
  spec.slices = 6;
  spec.rows = spec.cols = 24;
  spec.rng_seed = 7;
  spec.signal_low_hu = -100;
  spec.signal_high_hu = 150;
  const auto a = generate_phantoms(spec);
  const auto b = generate_phantoms(spec);
  ASSERT_EQ(a.size(), 40u);
  std::size_t positives = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].volume.voxels, b[i].volume.voxels);
    EXPECT_EQ(a[i].volume.label, b[i].volume.label);
    positives += a[i].volume.label;
    std::size_t signal = 0;
    for (std::size_t k = 0; k < a[i].signal_mask.size(); ++k) {
      if (!a[i].signal_mask[k]) continue;
      ++signal;
      const double hu = a[i].volume.voxels.data()[k];
      EXPECT_GT(hu, -100.0);
      EXPECT_LT(hu, 150.0);
    }
    EXPECT_EQ(signal > 0, a[i].volume.label == 1);
  }
  EXPECT_EQ(positives, 20u);

  spec.signal_low_hu = -2000;
  expect_error(ErrorKind::kInvalidBand, [&] { generate_phantoms(spec); });
}

TEST(Ingestion, SplitPatients) {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("p" + std::to_string(i));
  const auto s = split_patients(ids, {0.6, 0.2, 0.2}, 42);
  EXPECT_EQ(s.train.size(), 6u);
  EXPECT_EQ(s.validation.size(), 2u);
  EXPECT_EQ(s.test.size(), 2u);
  std::set<std::string> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 10u);
  const auto again = split_patients(ids, {0.6, 0.2, 0.2}, 42);
  EXPECT_EQ(again.train, s.train);
  EXPECT_EQ(again.test, s.test);

  std::vector<std::string> many;
  for (int i = 0; i < 719; ++i) many.push_back("c" + std::to_string(i));
  const auto cohort = split_patients(many, {526.0 / 719, 93.0 / 719, 100.0 / 719}, 42);
  EXPECT_EQ(cohort.train.size(), 526u);
  EXPECT_EQ(cohort.validation.size(), 93u);
  EXPECT_EQ(cohort.test.size(), 100u);

  expect_error(ErrorKind::kEmptyPartition, [&] { split_patients(ids, {0.9, 0.06, 0.04}, 1); });
}
