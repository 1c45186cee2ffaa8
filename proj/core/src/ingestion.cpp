#include "xwd/ingestion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "xwd/error.hpp"
#include "xwd/random.hpp"

namespace xwd {

namespace fs = std::filesystem;
using nlohmann::json;

TaskMode parse_task_mode(const std::string& name) {
  if (name == "diffuse") return TaskMode::kDiffuse;
  if (name == "focal") return TaskMode::kFocal;
  throw Error(ErrorKind::kInvalidConfig, "unknown task mode '" + name + "'");
}

std::string to_string(TaskMode mode) {
  return mode == TaskMode::kDiffuse ? "diffuse" : "focal";
}

std::string to_string(PartitionRole role) {
  switch (role) {
    case PartitionRole::kTrain: return "train";
    case PartitionRole::kValidation: return "validation";
    case PartitionRole::kTest: return "test";
  }
  return "unknown";
}

void SamplingPlan::validate() const {
  if (target_slices == 0) throw Error(ErrorKind::kInvalidConfig, "target_slices must be positive");
  if (!(trim_fraction >= 0.0 && trim_fraction < 0.5)) {
    throw Error(ErrorKind::kInvalidConfig, "trim_fraction must lie in [0, 0.5)");
  }
  if (!(region_start_fraction >= 0.0 && region_start_fraction < 1.0)) {
    throw Error(ErrorKind::kInvalidConfig, "region_start_fraction must lie in [0, 1)");
  }
}

PhantomSpec PhantomSpec::mechanism_default() {
  PhantomSpec spec;
  spec.n_patients = 1000;
  spec.class_balance = 0.5;
  spec.signal_low_hu = -155.0;
  spec.signal_high_hu = 195.0;
  spec.signal_texture_amplitude = 150.0;
  spec.background_tissue_mix = {
      {-860.0, 90.0, 0.50},  // parenchyma
      {40.0, 12.0, 0.30},    // soft tissue
      {-1000.0, 5.0, 0.10},  // air
      {600.0, 150.0, 0.10},  // bone
  };
  spec.slices = 10;
  spec.rows = 64;
  spec.cols = 64;
  spec.signal_radius_fraction = 0.3;
  spec.scanner_noise_hu = 0.0;
  return spec;
}

void PhantomSpec::validate() const {
  if (!(signal_low_hu >= -1024.0 && signal_high_hu <= 3071.0 && signal_low_hu < signal_high_hu)) {
    throw Error(ErrorKind::kInvalidBand, "signal band must be a sub-interval of [-1024, 3071]");
  }
  if (!(class_balance > 0.0 && class_balance < 1.0)) {
    throw Error(ErrorKind::kInvalidSpec, "class_balance must lie in (0, 1)");
  }
  if (background_tissue_mix.empty()) {
    throw Error(ErrorKind::kInvalidSpec, "background_tissue_mix is empty");
  }
  double total = 0.0;
  for (const auto& t : background_tissue_mix) {
    if (t.fraction < 0.0 || t.stddev_hu < 0.0) {
      throw Error(ErrorKind::kInvalidSpec, "tissue fractions and stddevs must be nonnegative");
    }
    total += t.fraction;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw Error(ErrorKind::kInvalidSpec, "tissue volume fractions must sum to 1");
  }
  if (signal_texture_amplitude < 0.0) {
    throw Error(ErrorKind::kInvalidSpec, "signal_texture_amplitude must be nonnegative");
  }
  if (n_patients == 0 || slices < 3 || rows == 0 || cols == 0) {
    throw Error(ErrorKind::kInvalidSpec, "phantom grid and cohort size must be positive");
  }
  if (!(signal_radius_fraction > 0.0 && signal_radius_fraction < 0.5)) {
    throw Error(ErrorKind::kInvalidSpec, "signal_radius_fraction must lie in (0, 0.5)");
  }
}

// --- series I/O -------------------------------------------------------------

RawSeries orient(RawSeries series) {
  std::stable_sort(series.slices.begin(), series.slices.end(),
                   [](const RawSlice& a, const RawSlice& b) { return a.position < b.position; });
  for (std::size_t i = 1; i < series.slices.size(); ++i) {
    if (!(series.slices[i].position > series.slices[i - 1].position)) {
      throw Error(ErrorKind::kInvalidSeries,
                  "duplicate slice position " + std::to_string(series.slices[i].position));
    }
  }
  return series;
}

RawSeries load_series(const fs::path& source) {
  const fs::path meta_path = source / "series.json";
  std::ifstream in(meta_path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + meta_path.string());
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kIo, meta_path.string() + ": " + e.what());
  }
  for (const char* key : {"rescale_slope", "rescale_intercept", "slices"}) {
    if (!meta.contains(key)) {
      throw Error(ErrorKind::kMissingMetadata, meta_path.string() + " lacks '" + key + "'");
    }
  }
  RawSeries series;
  series.patient_id = meta.value("patient_id", source.filename().string());
  series.label = meta.value("label", 0);
  series.rescale_slope = meta.at("rescale_slope").get<double>();
  series.rescale_intercept = meta.at("rescale_intercept").get<double>();

  for (const auto& entry : meta.at("slices")) {
    if (!entry.contains("position") || !entry.contains("file") || !entry.contains("rows") ||
        !entry.contains("cols")) {
      throw Error(ErrorKind::kMissingMetadata, "slice entry lacks file/position/rows/cols");
    }
    RawSlice slice;
    slice.position = entry.at("position").get<double>();
    slice.rows = entry.at("rows").get<std::size_t>();
    slice.cols = entry.at("cols").get<std::size_t>();
    if (!series.slices.empty() &&
        (slice.rows != series.slices.front().rows || slice.cols != series.slices.front().cols)) {
      throw Error(ErrorKind::kInconsistentShape,
                  "slice " + entry.at("file").get<std::string>() + " is " +
                      std::to_string(slice.rows) + "x" + std::to_string(slice.cols) +
                      ", expected " + std::to_string(series.slices.front().rows) + "x" +
                      std::to_string(series.slices.front().cols));
    }
    const fs::path pixel_path = source / entry.at("file").get<std::string>();
    std::ifstream px(pixel_path, std::ios::binary);
    if (!px) throw Error(ErrorKind::kIo, "cannot open " + pixel_path.string());
    const std::size_t count = slice.rows * slice.cols;
    std::vector<unsigned char> bytes(count * 2);
    px.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(px.gcount()) != bytes.size()) {
      throw Error(ErrorKind::kIo, pixel_path.string() + " holds fewer pixels than declared");
    }
    slice.pixels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const auto u = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
      slice.pixels[i] = static_cast<std::int16_t>(u);
    }
    series.slices.push_back(std::move(slice));
  }
  if (series.slices.size() < 3) {
    throw Error(ErrorKind::kTooFewSlices,
                "series has " + std::to_string(series.slices.size()) + " slices, need >= 3");
  }
  return orient(std::move(series));
}

void write_series(const RawSeries& series, const fs::path& dir) {
  fs::create_directories(dir);
  json meta;
  meta["patient_id"] = series.patient_id;
  meta["label"] = series.label;
  meta["rescale_slope"] = series.rescale_slope;
  meta["rescale_intercept"] = series.rescale_intercept;
  meta["slices"] = json::array();
  for (std::size_t i = 0; i < series.slices.size(); ++i) {
    const auto& slice = series.slices[i];
    char name[32];
    std::snprintf(name, sizeof(name), "slice_%04zu.raw", i);
    std::ofstream px(dir / name, std::ios::binary);
    if (!px) throw Error(ErrorKind::kIo, "cannot write " + (dir / name).string());
    for (std::int32_t v : slice.pixels) {
      const auto s = static_cast<std::uint16_t>(static_cast<std::int16_t>(v));
      const char b[2] = {static_cast<char>(s & 0xff), static_cast<char>(s >> 8)};
      px.write(b, 2);
    }
    meta["slices"].push_back(
        {{"file", name}, {"position", slice.position}, {"rows", slice.rows}, {"cols", slice.cols}});
  }
  std::ofstream out(dir / "series.json");
  out << meta.dump(2) << '\n';
}

HUVolume to_hu(const RawSeries& series) {
  if (series.slices.empty()) throw Error(ErrorKind::kTooFewSlices, "empty series");
  const std::size_t rows = series.slices.front().rows;
  const std::size_t cols = series.slices.front().cols;
  HUVolume out;
  out.patient_id = series.patient_id;
  out.label = series.label;
  out.voxels = Tensor::volume(series.slices.size(), rows, cols);
  auto& data = out.voxels.data();
  std::size_t k = 0;
  for (const auto& slice : series.slices) {
    if (slice.rows != rows || slice.cols != cols) {
      throw Error(ErrorKind::kInconsistentShape, "mixed slice dimensions");
    }
    for (std::int32_t p : slice.pixels) {
      data[k++] = static_cast<double>(p) * series.rescale_slope + series.rescale_intercept;
    }
  }
  return out;
}

RawSeries to_raw_series(const HUVolume& volume, double first_position, double spacing) {
  RawSeries series;
  series.patient_id = volume.patient_id;
  series.label = volume.label;
  series.rescale_slope = 1.0;
  series.rescale_intercept = -1024.0;
  const auto& v = volume.voxels;
  for (std::size_t z = 0; z < v.depth(); ++z) {
    RawSlice slice;
    slice.rows = v.height();
    slice.cols = v.width();
    slice.position = first_position + spacing * static_cast<double>(z);
    slice.pixels.reserve(slice.rows * slice.cols);
    for (std::size_t y = 0; y < v.height(); ++y) {
      for (std::size_t x = 0; x < v.width(); ++x) {
        slice.pixels.push_back(static_cast<std::int32_t>(std::lround(v.at(z, y, x) + 1024.0)));
      }
    }
    series.slices.push_back(std::move(slice));
  }
  return series;
}

// --- slice selection --------------------------------------------------------

std::vector<std::size_t> sample_indices(std::size_t n_slices, const SamplingPlan& plan) {
  plan.validate();
  const auto trim = static_cast<std::size_t>(std::floor(plan.trim_fraction * n_slices));
  if (n_slices <= 2 * trim) {
    throw Error(ErrorKind::kEmptyAfterTrim, "no slices remain after trimming " +
                                                std::to_string(trim) + " from each end of " +
                                                std::to_string(n_slices));
  }
  const std::size_t kept = n_slices - 2 * trim;
  const std::size_t target = plan.target_slices;

  auto start = static_cast<std::size_t>(std::floor(plan.region_start_fraction * kept));
  start = std::min(start, kept - 1);
  std::size_t end = kept;  // region runs to the last kept slice

  if (end - start < target) {
    // Grow symmetrically toward both kept ends; spill over when one side hits its bound.
    const std::size_t deficit = target - (end - start);
    std::size_t grow_left = deficit / 2;
    std::size_t grow_right = deficit - grow_left;
    const std::size_t room_right = kept - end;
    if (grow_right > room_right) {
      grow_left += grow_right - room_right;
      grow_right = room_right;
    }
    if (grow_left > start) {
      grow_right = std::min(grow_right + (grow_left - start), kept - end);
      grow_left = start;
    }
    start -= grow_left;
    end += grow_right;
  }

  const std::size_t m = end - start;
  std::vector<std::size_t> indices(target);
  for (std::size_t k = 0; k < target; ++k) {
    indices[k] = trim + start + (k * m) / target;
  }
  return indices;
}

HUVolume trim_and_sample(const HUVolume& volume, const SamplingPlan& plan) {
  const auto& v = volume.voxels;
  if (v.depth() < 3) {
    throw Error(ErrorKind::kTooFewSlices, "volume has " + std::to_string(v.depth()) + " slices");
  }
  const auto indices = sample_indices(v.depth(), plan);
  HUVolume out{volume.patient_id, volume.label,
               Tensor::volume(indices.size(), v.height(), v.width())};
  const std::size_t plane = v.height() * v.width();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(indices[k] * plane), plane,
                out.voxels.data().begin() + static_cast<std::ptrdiff_t>(k * plane));
  }
  return out;
}

// --- resampling -------------------------------------------------------------

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;
};

std::vector<Tap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

HUVolume resize_slices(const HUVolume& volume, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw Error(ErrorKind::kInvalidArgument, "out_hw must be positive");
  const auto& v = volume.voxels;
  HUVolume out{volume.patient_id, volume.label, Tensor::volume(v.depth(), out_h, out_w)};
  const auto ty = linear_taps(v.height(), out_h);
  const auto tx = linear_taps(v.width(), out_w);
  for (std::size_t z = 0; z < v.depth(); ++z) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& b = tx[x];
        const double top = (1.0 - b.frac) * v.at(z, a.lo, b.lo) + b.frac * v.at(z, a.lo, b.hi);
        const double bottom = (1.0 - b.frac) * v.at(z, a.hi, b.lo) + b.frac * v.at(z, a.hi, b.hi);
        out.voxels.at(z, y, x) = (1.0 - a.frac) * top + a.frac * bottom;
      }
    }
  }
  return out;
}

// --- phantoms ---------------------------------------------------------------

namespace {

// Low-frequency random field used to lay out tissue classes.
std::vector<double> smooth_field(std::size_t d, std::size_t h, std::size_t w, Rng& rng) {
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> freq(0.5, 2.5);
  struct Wave {
    double fz, fy, fx, phi, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 6; ++i) {
    waves.push_back({freq(rng) * 0.5, freq(rng), freq(rng), phase(rng), 1.0 / (1 + i)});
  }
  std::vector<double> field(d * h * w);
  std::size_t k = 0;
  for (std::size_t z = 0; z < d; ++z) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (const auto& wv : waves) {
          const double arg = 2.0 * std::numbers::pi *
                                 (wv.fz * z / static_cast<double>(d) +
                                  wv.fy * y / static_cast<double>(h) +
                                  wv.fx * x / static_cast<double>(w)) +
                             wv.phi;
          s += wv.amp * std::cos(arg);
        }
        field[k++] = s;
      }
    }
  }
  return field;
}

}  // namespace

std::vector<PhantomCase> generate_phantoms(const PhantomSpec& spec) {
  spec.validate();
  const std::size_t n_pos =
      static_cast<std::size_t>(std::llround(spec.class_balance * static_cast<double>(spec.n_patients)));
  // Label layout is shuffled so ids carry no class information.
  std::vector<int> labels(spec.n_patients, 0);
  std::fill_n(labels.begin(), std::min(n_pos, spec.n_patients), 1);
  Rng label_rng(derive_seed(spec.rng_seed, "labels"));
  std::shuffle(labels.begin(), labels.end(), label_rng);

  const double centre_hu = 0.5 * (spec.signal_low_hu + spec.signal_high_hu);
  const double half_band = 0.5 * (spec.signal_high_hu - spec.signal_low_hu);
  // Texture stays strictly inside the open band.
  const double amplitude = std::min(spec.signal_texture_amplitude, half_band * 0.98);
  const double inner_low = std::nextafter(spec.signal_low_hu, spec.signal_high_hu);
  const double inner_high = std::nextafter(spec.signal_high_hu, spec.signal_low_hu);

  const std::size_t d = spec.slices, h = spec.rows, w = spec.cols;
  std::vector<PhantomCase> out;
  out.reserve(spec.n_patients);
  for (std::size_t p = 0; p < spec.n_patients; ++p) {
    Rng rng(derive_seed(spec.rng_seed, static_cast<std::uint64_t>(p)));
    PhantomCase c;
    char id[32];
    std::snprintf(id, sizeof(id), "ph%04zu", p);
    c.volume.patient_id = id;
    c.volume.label = labels[p];
    c.volume.voxels = Tensor::volume(d, h, w);
    c.signal_mask.assign(d * h * w, 0);

    // Tissue layout: rank the smooth field and cut at cumulative fractions.
    const auto field = smooth_field(d, h, w, rng);
    std::vector<std::size_t> order(field.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return field[a] < field[b]; });
    std::uniform_real_distribution<double> jitter(0.5, 1.5);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto& vox = c.volume.voxels.data();
    std::size_t cursor = 0;
    double cumulative = 0.0;
    for (std::size_t t = 0; t < spec.background_tissue_mix.size(); ++t) {
      const auto& tissue = spec.background_tissue_mix[t];
      cumulative += tissue.fraction;
      const std::size_t stop = (t + 1 == spec.background_tissue_mix.size())
                                   ? order.size()
                                   : std::min(order.size(), static_cast<std::size_t>(std::llround(
                                                                cumulative * order.size())));
      const double sd = tissue.stddev_hu * jitter(rng);
      for (; cursor < stop; ++cursor) {
        vox[order[cursor]] = tissue.mean_hu + sd * gauss(rng);
      }
    }
    if (spec.scanner_noise_hu > 0.0) {
      for (auto& v : vox) v += spec.scanner_noise_hu * gauss(rng);
    }

    // Signal blob: same placement law for both classes; only positives carry texture.
    const double radius = spec.signal_radius_fraction * static_cast<double>(std::min(h, w));
    const double radius_z = std::max(1.0, 0.35 * static_cast<double>(d));
    std::uniform_real_distribution<double> cy(radius, static_cast<double>(h) - radius);
    std::uniform_real_distribution<double> cx(radius, static_cast<double>(w) - radius);
    std::uniform_real_distribution<double> texture(-1.0, 1.0);
    const double centre_y = cy(rng), centre_x = cx(rng);
    const double centre_z = 0.5 * static_cast<double>(d - 1);
    for (std::size_t z = 0; z < d; ++z) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double dz = (static_cast<double>(z) - centre_z) / radius_z;
          const double dy = (static_cast<double>(y) + 0.5 - centre_y) / radius;
          const double dx = (static_cast<double>(x) + 0.5 - centre_x) / radius;
          if (dz * dz + dy * dy + dx * dx > 1.0) continue;
          const std::size_t k = (z * h + y) * w + x;
          const double t = texture(rng);
          double value = centre_hu;
          if (c.volume.label == 1) {
            value = std::clamp(centre_hu + amplitude * t, inner_low, inner_high);
            c.signal_mask[k] = 1;
          }
          vox[k] = value;
        }
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

// --- splitting --------------------------------------------------------------

const std::vector<std::string>& DatasetSplit::ids(PartitionRole role) const {
  switch (role) {
    case PartitionRole::kTrain: return train;
    case PartitionRole::kValidation: return validation;
    case PartitionRole::kTest: return test;
  }
  return test;
}

DatasetSplit split_patients(std::vector<std::string> patient_ids, SplitFractions fractions,
                            std::uint64_t seed) {
  const double sum = fractions.train + fractions.validation + fractions.test;
  if (std::abs(sum - 1.0) > 1e-9 || fractions.train < 0 || fractions.validation < 0 ||
      fractions.test < 0) {
    throw Error(ErrorKind::kInvalidArgument, "split fractions must be nonnegative and sum to 1");
  }
  std::set<std::string> unique(patient_ids.begin(), patient_ids.end());
  if (unique.size() != patient_ids.size()) {
    throw Error(ErrorKind::kInvalidArgument, "duplicate patient ids");
  }
  // Canonical order first so the result depends only on the id set and seed.
  std::sort(patient_ids.begin(), patient_ids.end());
  Rng rng(seed);
  std::shuffle(patient_ids.begin(), patient_ids.end(), rng);

  const double n = static_cast<double>(patient_ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * n));
  const auto n_val = static_cast<std::size_t>(std::llround(fractions.validation * n));
  if (n_train + n_val > patient_ids.size()) {
    throw Error(ErrorKind::kEmptyPartition, "test partition would be empty");
  }
  const std::size_t n_test = patient_ids.size() - n_train - n_val;
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw Error(ErrorKind::kEmptyPartition,
                "split of " + std::to_string(patient_ids.size()) + " patients leaves a partition empty");
  }
  DatasetSplit split;
  auto it = patient_ids.begin();
  split.train.assign(it, it + static_cast<std::ptrdiff_t>(n_train));
  it += static_cast<std::ptrdiff_t>(n_train);
  split.validation.assign(it, it + static_cast<std::ptrdiff_t>(n_val));
  it += static_cast<std::ptrdiff_t>(n_val);
  split.test.assign(it, patient_ids.end());
  return split;
}

}  // namespace xwd
