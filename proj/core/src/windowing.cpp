#include "xwd/windowing.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "xwd/error.hpp"

namespace xwd {

WindowSet::WindowSet(std::vector<WindowSpec> windows) : windows_(std::move(windows)) {
  if (windows_.size() < 2) throw Error(ErrorKind::kInvalidConfig, "a window set needs K >= 2");
  std::set<std::string> seen;
  for (const auto& w : windows_) {
    if (!(w.width_hu > 0.0)) {
      throw Error(ErrorKind::kInvalidConfig, "window '" + w.name + "' has nonpositive width");
    }
    if (!seen.insert(w.name).second) {
      throw Error(ErrorKind::kInvalidConfig, "duplicate window name '" + w.name + "'");
    }
  }
}

const WindowSpec& WindowSet::at(const std::string& name) const {
  return windows_[index_of(name)];
}

bool WindowSet::contains(const std::string& name) const {
  return std::any_of(windows_.begin(), windows_.end(),
                     [&](const WindowSpec& w) { return w.name == name; });
}

std::size_t WindowSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < windows_.size(); ++i) {
    if (windows_[i].name == name) return i;
  }
  throw Error(ErrorKind::kWindowSetMismatch, "no window named '" + name + "'");
}

std::vector<std::string> WindowSet::names() const {
  std::vector<std::string> out;
  for (const auto& w : windows_) out.push_back(w.name);
  return out;
}

WindowSet default_window_set(TaskMode mode) {
  std::vector<WindowSpec> w = {
      {"lung", 1500.0, -600.0},
      {"mediastinal", 350.0, 20.0},
      {"hrct", 2000.0, -600.0},
      {"zero", 1500.0, 0.0},
  };
  if (mode == TaskMode::kDiffuse) {
    w.push_back({"bone", 1000.0, 250.0});
  } else {
    w.push_back({"pe", 700.0, 100.0});
  }
  return WindowSet(std::move(w));
}

double apply_window(double hu, const WindowSpec& spec) {
  const double lo = spec.lower();
  const double hi = spec.upper();
  if (hu <= lo) return 0.0;
  if (hu >= hi) return 1.0;
  return std::clamp((hu - lo) / spec.width_hu, 0.0, 1.0);
}

Tensor apply_window(const Tensor& hu, const WindowSpec& spec) {
  Tensor out = hu;
  for (auto& v : out.data()) v = apply_window(v, spec);
  return out;
}

WindowedStack make_windowed_stack(const HUVolume& volume, const WindowSet& windows) {
  WindowedStack stack{volume.patient_id, volume.label, {}};
  for (const auto& w : windows.windows()) stack.arrays.emplace(w.name, apply_window(volume.voxels, w));
  return stack;
}

NormStats fit_norm_stats(const TrainPartition& train, const std::string& window) {
  // Per-patient Welford pass, then Chan's pairwise merge in partition order.
  double count = 0.0, mean = 0.0, m2 = 0.0;
  for (const WindowedStack* stack : train.stacks) {
    auto it = stack->arrays.find(window);
    if (it == stack->arrays.end()) {
      throw Error(ErrorKind::kWindowSetMismatch,
                  "patient " + stack->patient_id + " has no '" + window + "' array");
    }
    double n_b = 0.0, mean_b = 0.0, m2_b = 0.0;
    for (double v : it->second.data()) {
      n_b += 1.0;
      const double delta = v - mean_b;
      mean_b += delta / n_b;
      m2_b += delta * (v - mean_b);
    }
    if (n_b == 0.0) continue;
    const double n = count + n_b;
    const double delta = mean_b - mean;
    mean += delta * n_b / n;
    m2 += m2_b + delta * delta * count * n_b / n;
    count = n;
  }
  if (count == 0.0) {
    throw Error(ErrorKind::kEmptyTrainingSet, "no training voxels for window '" + window + "'");
  }
  return NormStats{window, mean, std::sqrt(std::max(0.0, m2 / count)), 1e-8};
}

WindowedStack normalize(const WindowedStack& stack, const std::map<std::string, NormStats>& stats) {
  WindowedStack out{stack.patient_id, stack.label, {}};
  for (const auto& [name, array] : stack.arrays) {
    auto it = stats.find(name);
    if (it == stats.end()) {
      throw Error(ErrorKind::kWindowSetMismatch, "no normalization stats for '" + name + "'");
    }
    const NormStats& s = it->second;
    Tensor t = array;
    const double scale = s.stddev + s.epsilon;
    for (auto& v : t.data()) v = (v - s.mean) / scale;
    out.arrays.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace xwd
