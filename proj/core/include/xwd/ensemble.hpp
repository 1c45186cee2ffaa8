#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xwd/ingestion.hpp"
#include "xwd/model.hpp"
#include "xwd/windowing.hpp"

namespace xwd {

enum class Provenance { kSupervised, kTeacher, kDistilled };
std::string to_string(Provenance p);
Provenance parse_provenance(const std::string& name);

struct BaseModel {
  EncoderState state;
  Provenance provenance = Provenance::kSupervised;
};

// Rows are patients, columns follow the canonical window order.
struct ProbabilityMatrix {
  PartitionRole role = PartitionRole::kValidation;
  std::vector<std::string> windows;
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<std::vector<double>> rows;
};

// One frozen model per window of `windows`, looked up by window name.
ProbabilityMatrix collect_probabilities(const std::map<std::string, const EncoderState*>& models,
                                        const WindowSet& windows,
                                        std::span<const WindowedStack* const> stacks,
                                        PartitionRole role);

template <PartitionRole Role>
ProbabilityMatrix collect_probabilities(const std::map<std::string, const EncoderState*>& models,
                                        const WindowSet& windows, const PartitionView<Role>& data) {
  return collect_probabilities(models, windows, data.stacks, Role);
}

struct MetaLearner {
  std::vector<std::string> windows;
  std::vector<double> weights;
  double bias = 0.0;
  double l2_strength = 1.0;
  std::size_t iterations = 0;
  double gradient_norm = 0.0;
};

// Minimizes sum_i logloss_i + (l2 / 2) * |w|^2 by damped Newton steps. Only
// validation-role matrices are accepted.
MetaLearner fit_meta(const ProbabilityMatrix& validation, double l2_strength = 1.0);

double predict_ensemble(const MetaLearner& meta, std::span<const double> probabilities);

struct Pipeline {
  std::string name;
  WindowSet windows;
  std::vector<BaseModel> models;  // canonical window order
  MetaLearner meta;

  std::map<std::string, const EncoderState*> model_map() const;
};

struct Predictions {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<double> probabilities;
};

Predictions predict_pipeline(const Pipeline& pipeline, const WindowSet& target_windows,
                             std::span<const WindowedStack* const> stacks);

// Supervised pipeline: the K supervised models. Distilled pipeline: the teacher
// plus the K-1 distilled students. Both meta-learners use one l2 setting and
// the same validation patients.
std::pair<Pipeline, Pipeline> build_pipelines(const std::string& teacher_window,
                                              const std::vector<BaseModel>& supervised,
                                              const std::vector<BaseModel>& distilled,
                                              const WindowSet& windows,
                                              const ValidationPartition& validation,
                                              double l2_strength = 1.0);

}  // namespace xwd
