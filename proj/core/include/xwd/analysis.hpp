#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xwd/model.hpp"
#include "xwd/tensor.hpp"

namespace xwd {

// Mann-Whitney form: (concordant pairs + 0.5 * ties) / (n_pos * n_neg).
double compute_auc(std::span<const double> scores, std::span<const int> labels);

enum class Metric { kAccuracy, kF1, kRecall, kPrecision, kAuc };
std::string to_string(Metric metric);

// Threshold metrics count a sample as predicted positive when score >= threshold.
double compute_metric(Metric metric, std::span<const double> scores, std::span<const int> labels,
                      double threshold = 0.5);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

// Percentile interval over patient-level resamples drawn with replacement.
// Single-class resamples are redrawn for AUC and scored as-is otherwise.
Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels, Metric metric,
                      std::size_t n_resamples, std::uint64_t seed, double threshold = 0.5);

// Linear-interpolation quantile of an unsorted sample.
double percentile(std::vector<double> values, double q);

struct MetricValue {
  double point = 0.0;
  Interval ci;
};

struct MetricsReport {
  MetricValue accuracy, f1, recall, precision, auc;
  std::size_t n_bootstrap = 1000;
  std::uint64_t seed = 0;
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<double> probabilities;
  std::vector<bool> per_sample_correct;

  const MetricValue& get(Metric metric) const;
};

MetricsReport evaluate_predictions(std::vector<std::string> ids, std::vector<int> labels,
                                   std::vector<double> probabilities, std::size_t n_bootstrap,
                                   std::uint64_t seed);

// Writes `{stem}.json` (metric -> value, ci_low, ci_high) and `{stem}.csv`
// (patient_id, label, probability, correct).
void write_metrics_report(const MetricsReport& report, const std::filesystem::path& stem);

struct PairedTestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

// Two-sided paired t-test on a - b. Zero-variance differences give statistic 0
// and p = 1 when the mean is zero, and an infinite statistic with p = 0 otherwise.
PairedTestResult paired_test(std::span<const double> a, std::span<const double> b);

// Probability each model assigned to the true class; the operand of paired_test.
std::vector<double> true_class_probabilities(std::span<const double> probabilities,
                                             std::span<const int> labels);

struct VennCounts {
  std::size_t corrected = 0;      // supervised wrong, distilled right
  std::size_t joint_correct = 0;
  std::size_t new_errors = 0;     // supervised right, distilled wrong
  std::size_t both_wrong = 0;
};

VennCounts venn_agreement(const std::vector<bool>& supervised_correct,
                          const std::vector<bool>& distilled_correct);

struct AttentionMap {
  Tensor heatmap;  // (1, T, H, W) in [0, 1]
  std::string target_layer;
};

// Trilinear resampling with half-pixel centres, channel by channel.
Tensor upsample_trilinear(const Tensor& x, std::size_t d, std::size_t h, std::size_t w);

// ReLU(sum_k mean(gradient_k) * activation_k), upsampled and max-normalized.
Tensor combine_cam(const Tensor& activation, const Tensor& gradient, std::size_t d, std::size_t h,
                   std::size_t w);

// Default target is the final convolutional stage.
AttentionMap grad_cam(const EncoderState& state, const Tensor& x, const std::string& target_layer = "");

}  // namespace xwd
