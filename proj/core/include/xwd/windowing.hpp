#pragma once

#include <map>
#include <string>
#include <vector>

#include "xwd/ingestion.hpp"
#include "xwd/tensor.hpp"

namespace xwd {

struct WindowSpec {
  std::string name;
  double width_hu = 1.0;
  double level_hu = 0.0;

  double lower() const { return level_hu - width_hu / 2.0; }
  double upper() const { return level_hu + width_hu / 2.0; }
  bool operator==(const WindowSpec&) const = default;
};

// Ordered window list; the order is canonical everywhere (teacher tie-break,
// probability-vector columns, manifest layout).
class WindowSet {
 public:
  WindowSet() = default;
  explicit WindowSet(std::vector<WindowSpec> windows);

  const std::vector<WindowSpec>& windows() const { return windows_; }
  std::size_t size() const { return windows_.size(); }
  const WindowSpec& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;
  std::vector<std::string> names() const;

  bool operator==(const WindowSet&) const = default;

 private:
  std::vector<WindowSpec> windows_;
};

WindowSet default_window_set(TaskMode mode);

// (clip(I, L - W/2, L + W/2) - (L - W/2)) / W, element-wise.
double apply_window(double hu, const WindowSpec& spec);
Tensor apply_window(const Tensor& hu, const WindowSpec& spec);

struct NormStats {
  std::string window;
  double mean = 0.0;
  double stddev = 0.0;  // population
  double epsilon = 1e-8;
};

struct WindowedStack {
  std::string patient_id;
  int label = 0;
  std::map<std::string, Tensor> arrays;  // window name -> (1, T, H, W)
};

WindowedStack make_windowed_stack(const HUVolume& volume, const WindowSet& windows);

// Read-only view over one partition's stacks. The role is part of the type, so
// statistics fitting can only be handed training data.
template <PartitionRole Role>
struct PartitionView {
  std::vector<const WindowedStack*> stacks;

  static constexpr PartitionRole role = Role;
  std::size_t size() const { return stacks.size(); }
};

using TrainPartition = PartitionView<PartitionRole::kTrain>;
using ValidationPartition = PartitionView<PartitionRole::kValidation>;
using TestPartition = PartitionView<PartitionRole::kTest>;

NormStats fit_norm_stats(const TrainPartition& train, const std::string& window);

WindowedStack normalize(const WindowedStack& stack, const std::map<std::string, NormStats>& stats);

}  // namespace xwd
