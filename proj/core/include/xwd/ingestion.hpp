#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "xwd/tensor.hpp"

namespace xwd {

// One acquired slice: integer pixels in row-major (rows x cols) order.
struct RawSlice {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> pixels;
  double position = 0.0;  // cranio-caudal coordinate
};

struct RawSeries {
  std::string patient_id;
  int label = 0;
  double rescale_slope = 1.0;
  double rescale_intercept = 0.0;
  std::vector<RawSlice> slices;
};

struct HUVolume {
  std::string patient_id;
  int label = 0;
  Tensor voxels;  // (1, T, H, W) in Hounsfield Units
};

enum class TaskMode { kDiffuse, kFocal };

TaskMode parse_task_mode(const std::string& name);
std::string to_string(TaskMode mode);

struct SamplingPlan {
  TaskMode task_mode = TaskMode::kDiffuse;
  std::size_t target_slices = 32;
  double region_start_fraction = 0.40;
  double trim_fraction = 0.10;

  static SamplingPlan diffuse() { return {TaskMode::kDiffuse, 32, 0.40, 0.10}; }
  static SamplingPlan focal() { return {TaskMode::kFocal, 128, 0.0, 0.10}; }
  void validate() const;
};

struct TissueClass {
  double mean_hu = 0.0;
  double stddev_hu = 0.0;
  double fraction = 0.0;
};

struct PhantomSpec {
  std::size_t n_patients = 40;
  double class_balance = 0.5;
  double signal_low_hu = -155.0;
  double signal_high_hu = 195.0;
  double signal_texture_amplitude = 120.0;
  std::vector<TissueClass> background_tissue_mix;
  std::uint64_t rng_seed = 0;
  // Raw acquisition grid of each synthetic series.
  std::size_t slices = 12;
  std::size_t rows = 64;
  std::size_t cols = 64;
  // Signal blob radius as a fraction of the in-plane extent.
  double signal_radius_fraction = 0.22;
  // Per-voxel acquisition noise added to background tissue.
  double scanner_noise_hu = 0.0;

  // Mediastinal-band signal hidden among lung-window distractors.
  static PhantomSpec mechanism_default();
  void validate() const;
};

// Reads the minimal uncompressed series layout: `series.json` listing slices
// plus one little-endian int16 file per slice. Slices come back sorted by
// ascending position.
RawSeries load_series(const std::filesystem::path& source);
void write_series(const RawSeries& series, const std::filesystem::path& dir);

// Sorts slices by ascending position; rejects duplicate positions.
RawSeries orient(RawSeries series);

HUVolume to_hu(const RawSeries& series);

// Source slice indices selected from an N-slice series.
std::vector<std::size_t> sample_indices(std::size_t n_slices, const SamplingPlan& plan);
HUVolume trim_and_sample(const HUVolume& volume, const SamplingPlan& plan);

// Per-slice bilinear resampling with half-pixel centres.
HUVolume resize_slices(const HUVolume& volume, std::size_t out_h, std::size_t out_w);

struct PhantomCase {
  HUVolume volume;
  std::vector<std::uint8_t> signal_mask;  // 1 where a voxel carries signal texture
};

// Deterministic under spec.rng_seed. Positives carry a textured blob whose HU
// values lie strictly inside the signal band; negatives get the same blob flat
// at the band centre.
std::vector<PhantomCase> generate_phantoms(const PhantomSpec& spec);

// Inverse of to_hu for synthetic data: quantizes HU with slope 1, intercept -1024.
RawSeries to_raw_series(const HUVolume& volume, double first_position = 0.0,
                        double spacing = 2.5);

enum class PartitionRole { kTrain, kValidation, kTest };
std::string to_string(PartitionRole role);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  const std::vector<std::string>& ids(PartitionRole role) const;
};

struct SplitFractions {
  double train = 0.7;
  double validation = 0.15;
  double test = 0.15;
};

// Patient-level shuffle then cut. Counts: train = round(f_train * N),
// validation = round(f_val * N), test = the remainder.
DatasetSplit split_patients(std::vector<std::string> patient_ids, SplitFractions fractions,
                            std::uint64_t seed);

}  // namespace xwd
