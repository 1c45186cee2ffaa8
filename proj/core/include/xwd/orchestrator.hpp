#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xwd/ingestion.hpp"
#include "xwd/model.hpp"
#include "xwd/training.hpp"
#include "xwd/windowing.hpp"

namespace xwd {

inline constexpr int kConfigSchemaVersion = 1;

struct DataSource {
  std::string kind = "phantom";  // "phantom" or "series"
  std::filesystem::path path;    // series root: one sub-directory per patient
  PhantomSpec phantom;
  bool flip_labels = false;
};

struct TransferConfig {
  DataSource target;
  SplitFractions split;
  // Head fine-tuning runs on cached features, so it gets its own schedule.
  double head_lr = 1e-2;
  std::size_t head_epochs = 200;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  DataSource data;
  SamplingPlan sampling;
  std::optional<std::vector<WindowSpec>> windows;  // default set of the task mode when absent
  EncoderConfig encoder;
  TrainConfig training;
  SplitFractions split;
  double meta_l2 = 1.0;
  std::size_t n_bootstrap = 1000;
  std::size_t attention_maps = 2;  // test patients exported per base model
  std::optional<TransferConfig> transfer;
  std::filesystem::path output_dir;

  WindowSet window_set() const;
  void validate() const;

  // Canonical form: every field explicit, keys sorted. output_dir is excluded
  // since it says where artifacts go, not what they are.
  nlohmann::json canonical() const;
  std::string hash() const;

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

enum class Stage { kPreprocess, kTrainBaselines, kSelectTeacher, kDistill, kEnsemble, kTransfer, kAnalyze };
std::string to_string(Stage stage);
Stage parse_stage(const std::string& name);
const std::vector<Stage>& all_stages();

struct RunStats {
  std::size_t training_steps = 0;
  std::vector<std::string> executed;  // unit names
  std::vector<std::string> skipped;
};

// Output directory: the config's, else $XWD_OUTPUT_DIR, else InvalidConfig.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

// Owns one experiment directory for its lifetime (lock file).
class Experiment {
 public:
  explicit Experiment(ExperimentConfig config);
  ~Experiment();
  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  RunStats run(Stage stage);
  RunStats run_all();

  const nlohmann::json& manifest() const { return manifest_; }
  const std::filesystem::path& root() const { return root_; }
  const ExperimentConfig& config() const { return config_; }

 private:
  struct Impl;

  ExperimentConfig config_;
  std::filesystem::path root_;
  nlohmann::json manifest_;
  std::unique_ptr<Impl> impl_;
};

// Writes each phantom patient as a raw series directory under `dir`.
std::size_t write_phantom_series(const ExperimentConfig& config, const std::filesystem::path& dir);

// Manifest copy with wall-clock fields removed, for run-to-run comparison.
nlohmann::json strip_timestamps(nlohmann::json manifest);

}  // namespace xwd
