#include "xwd/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "xwd/error.hpp"

namespace xwd {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kSupervised: return "supervised";
    case Provenance::kTeacher: return "teacher";
    case Provenance::kDistilled: return "distilled";
  }
  return "unknown";
}

Provenance parse_provenance(const std::string& name) {
  if (name == "supervised") return Provenance::kSupervised;
  if (name == "teacher") return Provenance::kTeacher;
  if (name == "distilled") return Provenance::kDistilled;
  throw Error(ErrorKind::kInvalidArgument, "unknown provenance '" + name + "'");
}

ProbabilityMatrix collect_probabilities(const std::map<std::string, const EncoderState*>& models,
                                        const WindowSet& windows,
                                        std::span<const WindowedStack* const> stacks,
                                        PartitionRole role) {
  std::vector<const EncoderState*> ordered;
  std::vector<Encoder> encoders;
  for (const auto& w : windows.windows()) {
    auto it = models.find(w.name);
    if (it == models.end() || it->second == nullptr) {
      throw Error(ErrorKind::kMissingWindowModel, "no base model for window '" + w.name + "'");
    }
    if (it->second->trainable) {
      throw Error(ErrorKind::kInvalidArgument, "base model for '" + w.name + "' is not frozen");
    }
    ordered.push_back(it->second);
    encoders.emplace_back(it->second->config);
  }
  ProbabilityMatrix m;
  m.role = role;
  m.windows = windows.names();
  for (const WindowedStack* stack : stacks) {
    std::vector<double> row;
    row.reserve(ordered.size());
    for (std::size_t k = 0; k < ordered.size(); ++k) {
      auto it = stack->arrays.find(m.windows[k]);
      if (it == stack->arrays.end()) {
        throw Error(ErrorKind::kWindowSetMismatch,
                    "patient " + stack->patient_id + " lacks window '" + m.windows[k] + "'");
      }
      const auto h = encoders[k].forward(ordered[k]->encoder_params, it->second, nullptr);
      row.push_back(forward_logit(*ordered[k], h).probability());
    }
    m.ids.push_back(stack->patient_id);
    m.labels.push_back(stack->label);
    m.rows.push_back(std::move(row));
  }
  return m;
}

namespace {

double objective(const ProbabilityMatrix& m, const Eigen::VectorXd& theta, double l2) {
  const auto k = static_cast<Eigen::Index>(m.windows.size());
  double f = 0.5 * l2 * theta.head(k).squaredNorm();
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    double z = theta(k);
    for (Eigen::Index j = 0; j < k; ++j) z += theta(j) * m.rows[i][static_cast<std::size_t>(j)];
    // softplus(z) - y z, computed stably
    f += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - m.labels[i] * z;
  }
  return f;
}

}  // namespace

MetaLearner fit_meta(const ProbabilityMatrix& validation, double l2_strength) {
  if (validation.role != PartitionRole::kValidation) {
    throw Error(ErrorKind::kLeakage, "meta-learner may only be fitted on validation probabilities, got " +
                                         to_string(validation.role));
  }
  if (validation.rows.size() != validation.labels.size()) {
    throw Error(ErrorKind::kLengthMismatch, "probability rows and labels differ in count");
  }
  if (validation.rows.empty()) throw Error(ErrorKind::kEmptyPartition, "no validation rows");
  if (!(l2_strength > 0.0)) throw Error(ErrorKind::kInvalidArgument, "l2_strength must be positive");
  const int positives = static_cast<int>(std::count(validation.labels.begin(), validation.labels.end(), 1));
  if (positives == 0 || positives == static_cast<int>(validation.labels.size())) {
    throw Error(ErrorKind::kDegenerateLabels, "validation labels are all one class");
  }
  const auto k = static_cast<Eigen::Index>(validation.windows.size());
  for (const auto& row : validation.rows) {
    if (static_cast<Eigen::Index>(row.size()) != k) {
      throw Error(ErrorKind::kDimensionMismatch, "probability row length differs from K");
    }
  }

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(k + 1);
  Eigen::VectorXd best = theta;
  double best_f = objective(validation, theta, l2_strength);
  double grad_norm = std::numeric_limits<double>::infinity();
  std::size_t iter = 0;
  constexpr std::size_t kMaxIterations = 200;
  for (; iter < kMaxIterations; ++iter) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(k + 1);
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(k + 1, k + 1);
    for (Eigen::Index j = 0; j < k; ++j) {
      grad(j) = l2_strength * theta(j);
      hess(j, j) = l2_strength;
    }
    Eigen::VectorXd x(k + 1);
    for (std::size_t i = 0; i < validation.rows.size(); ++i) {
      for (Eigen::Index j = 0; j < k; ++j) x(j) = validation.rows[i][static_cast<std::size_t>(j)];
      x(k) = 1.0;
      const double p = sigmoid(theta.dot(x));
      grad += (p - validation.labels[i]) * x;
      hess += p * (1.0 - p) * x * x.transpose();
    }
    grad_norm = grad.norm();
    if (grad_norm < 1e-8) break;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    double t = 1.0;
    const double f0 = objective(validation, theta, l2_strength);
    Eigen::VectorXd candidate = theta - step;
    double f = objective(validation, candidate, l2_strength);
    while (f > f0 - 1e-4 * t * grad.dot(step) && t > 1e-10) {
      t *= 0.5;
      candidate = theta - t * step;
      f = objective(validation, candidate, l2_strength);
    }
    if (!(f <= f0)) break;
    theta = candidate;
    if (f < best_f) {
      best_f = f;
      best = theta;
    }
  }
  if (grad_norm < 1e-8) best = theta;

  MetaLearner meta;
  meta.windows = validation.windows;
  meta.weights.assign(best.data(), best.data() + k);
  meta.bias = best(k);
  meta.l2_strength = l2_strength;
  meta.iterations = iter;
  meta.gradient_norm = grad_norm;
  return meta;
}

double predict_ensemble(const MetaLearner& meta, std::span<const double> probabilities) {
  if (probabilities.size() != meta.weights.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "ensemble expects " + std::to_string(meta.weights.size()) +
                                                   " probabilities, got " +
                                                   std::to_string(probabilities.size()));
  }
  double z = meta.bias;
  for (std::size_t i = 0; i < probabilities.size(); ++i) z += meta.weights[i] * probabilities[i];
  return sigmoid(z);
}

std::map<std::string, const EncoderState*> Pipeline::model_map() const {
  std::map<std::string, const EncoderState*> out;
  for (const auto& m : models) out[m.state.window_name] = &m.state;
  return out;
}

Predictions predict_pipeline(const Pipeline& pipeline, const WindowSet& target_windows,
                             std::span<const WindowedStack* const> stacks) {
  if (!(pipeline.windows == target_windows)) {
    throw Error(ErrorKind::kWindowSetMismatch,
                "pipeline '" + pipeline.name + "' was built for a different window set");
  }
  // Role is irrelevant for inference; the matrix is never used for fitting.
  const auto matrix = collect_probabilities(pipeline.model_map(), pipeline.windows, stacks, PartitionRole::kTest);
  Predictions out{matrix.ids, matrix.labels, {}};
  for (const auto& row : matrix.rows) out.probabilities.push_back(predict_ensemble(pipeline.meta, row));
  return out;
}

std::pair<Pipeline, Pipeline> build_pipelines(const std::string& teacher_window,
                                              const std::vector<BaseModel>& supervised,
                                              const std::vector<BaseModel>& distilled,
                                              const WindowSet& windows,
                                              const ValidationPartition& validation,
                                              double l2_strength) {
  auto by_window = [](const std::vector<BaseModel>& models) {
    std::map<std::string, const BaseModel*> out;
    for (const auto& m : models) out[m.state.window_name] = &m;
    return out;
  };
  const auto sup = by_window(supervised);
  const auto dist = by_window(distilled);

  Pipeline sup_pipe{"supervised", windows, {}, {}};
  Pipeline dist_pipe{"distilled", windows, {}, {}};
  for (const auto& w : windows.windows()) {
    auto s = sup.find(w.name);
    if (s == sup.end()) throw Error(ErrorKind::kMissingWindowModel, "no supervised model for '" + w.name + "'");
    if (s->second->provenance != Provenance::kSupervised) {
      throw Error(ErrorKind::kProvenanceMismatch,
                  "supervised pipeline received a " + to_string(s->second->provenance) + " model for '" +
                      w.name + "'");
    }
    sup_pipe.models.push_back(*s->second);

    if (w.name == teacher_window) {
      BaseModel teacher = *s->second;
      teacher.provenance = Provenance::kTeacher;
      dist_pipe.models.push_back(std::move(teacher));
      continue;
    }
    auto d = dist.find(w.name);
    if (d == dist.end()) throw Error(ErrorKind::kMissingWindowModel, "no distilled student for '" + w.name + "'");
    if (d->second->provenance != Provenance::kDistilled) {
      throw Error(ErrorKind::kProvenanceMismatch, "distilled pipeline received a " +
                                                      to_string(d->second->provenance) + " model for '" +
                                                      w.name + "'");
    }
    dist_pipe.models.push_back(*d->second);
  }
  if (!windows.contains(teacher_window)) {
    throw Error(ErrorKind::kWindowSetMismatch, "teacher window '" + teacher_window + "' is not in the set");
  }
  sup_pipe.meta = fit_meta(collect_probabilities(sup_pipe.model_map(), windows, validation), l2_strength);
  dist_pipe.meta = fit_meta(collect_probabilities(dist_pipe.model_map(), windows, validation), l2_strength);
  return {std::move(sup_pipe), std::move(dist_pipe)};
}

}  // namespace xwd
