#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xwd/analysis.hpp"
#include "xwd/ensemble.hpp"
#include "xwd/model.hpp"
#include "xwd/windowing.hpp"

namespace xwd {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  std::size_t early_stop_patience = 10;
  double alpha = 0.5;
  double beta = 0.5;
  std::uint64_t seed = 42;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  // A validation loss counts as an improvement only if it drops by more than this.
  double min_improvement = 1e-6;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Per-epoch cosine annealing: lr * (1 + cos(pi * epoch / epochs)) / 2.
double cosine_lr(double base_lr, std::size_t epoch, std::size_t epochs);

class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, double min_improvement)
      : patience_(patience), min_improvement_(min_improvement) {}

  // Feeds one epoch's validation loss; returns true when it is a new best.
  bool update(double val_loss);
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based
  std::size_t epochs_seen() const { return seen_; }
  double best_loss() const { return best_loss_; }

 private:
  std::size_t patience_;
  double min_improvement_;
  std::size_t seen_ = 0;
  std::size_t stale_ = 0;
  std::size_t best_epoch_ = 0;
  double best_loss_ = 0.0;
};

class Adam {
 public:
  Adam(std::size_t n, const TrainConfig& cfg)
      : m_(n, 0.0), v_(n, 0.0), beta1_(cfg.adam_beta1), beta2_(cfg.adam_beta2), epsilon_(cfg.adam_epsilon) {}

  void step(std::span<double> params, std::span<const double> grads, double lr);

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, epsilon_;
  std::size_t t_ = 0;
};

struct LossTerms {
  double total = 0.0;
  double cls = 0.0;
  double kd = 0.0;
};

// Numerically stable BCE(sigmoid(z), y).
double bce_with_logit(double z, int y);

// L_cls = BCE(sigmoid(z_s), y); L_KD = |h_s - h_t|^2 / D; L_total = alpha L_cls + beta L_KD.
LossTerms distill_loss(std::span<const double> student_features, std::span<const double> teacher_features,
                       const Logit& student_logit, int label, const TrainConfig& cfg);

// One sample's loss and parameter gradients (accumulated, scaled by `weight`).
// Without teacher features the objective is plain BCE.
LossTerms accumulate_gradients(const Encoder& encoder, std::span<const double> theta,
                               std::span<const double> head, const Tensor& x, int label,
                               const std::vector<double>* teacher_features, const TrainConfig& cfg,
                               double weight, std::span<double> d_theta, std::span<double> d_head,
                               Tape& tape);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_cls = 0.0;
  double train_kd = 0.0;
  double val_loss = 0.0;
  double val_auc = 0.0;
  double wall_seconds = 0.0;
};

struct TrainingLog {
  std::string window;
  std::string mode;  // "supervised", "distilled" or "head"
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  bool stopped_early = false;
  double alpha = 1.0;
  double beta = 0.0;

  void write_jsonl(const std::filesystem::path& path) const;
};

struct TrainResult {
  EncoderState state;  // best-validation-loss checkpoint, frozen
  TrainingLog log;
  double best_val_auc = 0.0;
};

struct TrainingData {
  TrainPartition train;
  ValidationPartition validation;
};

TrainResult train_supervised(const std::string& window, const TrainingData& data,
                             const EncoderConfig& encoder_config, const TrainConfig& cfg);

TrainResult train_distilled(const std::string& student_window, const EncoderState& teacher,
                            const TrainingData& data, const EncoderConfig& encoder_config,
                            const TrainConfig& cfg);

struct TeacherSelection {
  std::string teacher;
  std::map<std::string, double> val_auc;
  std::vector<std::string> students;  // canonical order
};

// Argmax of validation AUC; ties go to the earliest window in `canonical_order`.
TeacherSelection select_teacher(const std::map<std::string, double>& val_auc,
                                const std::vector<std::string>& canonical_order);

// Validation AUC of one model on its own window.
double validation_auc(const EncoderState& state, const ValidationPartition& validation);

// Inference only; no parameter of the pipeline changes.
MetricsReport transfer_direct(const Pipeline& pipeline, const WindowSet& target_windows,
                              std::span<const WindowedStack* const> target, std::size_t n_bootstrap,
                              std::uint64_t seed);

struct FinetuneResult {
  Pipeline pipeline;
  MetricsReport report;  // on target validation
  std::vector<TrainingLog> logs;
};

// Re-fits every base model's head with BCE on frozen features; encoders and
// the meta-learner are carried over unchanged.
FinetuneResult transfer_finetune_heads(const Pipeline& pipeline, const WindowSet& target_windows,
                                       const TrainPartition& target_train,
                                       const ValidationPartition& target_val, const TrainConfig& cfg,
                                       std::size_t n_bootstrap, std::uint64_t seed);

}  // namespace xwd
