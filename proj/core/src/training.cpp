#include "xwd/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

#include "xwd/error.hpp"
#include "xwd/random.hpp"

namespace xwd {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kInvalidConfig, msg); };
  if (!(lr > 0.0)) fail("lr must be positive");
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (early_stop_patience == 0) fail("early_stop_patience must be positive");
  if (alpha < 0.0 || beta < 0.0) fail("alpha and beta must be nonnegative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("Adam moment coefficients must lie in [0, 1)");
  }
}

double cosine_lr(double base_lr, std::size_t epoch, std::size_t epochs) {
  if (epoch >= epochs) return 0.0;
  return base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs))) / 2.0;
}

bool EarlyStopping::update(double val_loss) {
  ++seen_;
  if (best_epoch_ == 0 || val_loss < best_loss_ - min_improvement_) {
    best_loss_ = val_loss;
    best_epoch_ = seen_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

void Adam::step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "optimizer state size differs from parameters");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
    params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + epsilon_);
  }
}

double bce_with_logit(double z, int y) {
  return std::max(z, 0.0) - z * static_cast<double>(y) + std::log1p(std::exp(-std::abs(z)));
}

LossTerms distill_loss(std::span<const double> student_features, std::span<const double> teacher_features,
                       const Logit& student_logit, int label, const TrainConfig& cfg) {
  if (student_features.size() != teacher_features.size() || student_features.empty()) {
    throw Error(ErrorKind::kDimensionMismatch,
                "student has " + std::to_string(student_features.size()) + " features, teacher " +
                    std::to_string(teacher_features.size()));
  }
  LossTerms t;
  t.cls = bce_with_logit(student_logit.z, label);
  double ss = 0.0;
  for (std::size_t i = 0; i < student_features.size(); ++i) {
    const double d = student_features[i] - teacher_features[i];
    ss += d * d;
  }
  t.kd = ss / static_cast<double>(student_features.size());
  t.total = cfg.alpha * t.cls + cfg.beta * t.kd;
  return t;
}

LossTerms accumulate_gradients(const Encoder& encoder, std::span<const double> theta,
                               std::span<const double> head, const Tensor& x, int label,
                               const std::vector<double>* teacher_features, const TrainConfig& cfg,
                               double weight, std::span<double> d_theta, std::span<double> d_head,
                               Tape& tape) {
  const std::vector<double> h = encoder.forward(theta, x, &tape);
  const std::size_t dim = h.size();
  const Logit z = forward_logit(head, h);
  const double residual = z.probability() - static_cast<double>(label);

  LossTerms terms;
  double dz = residual;
  std::vector<double> dh(dim, 0.0);
  if (teacher_features) {
    terms = distill_loss(h, *teacher_features, z, label, cfg);
    dz = cfg.alpha * residual;
    const double kd_scale = cfg.beta * 2.0 / static_cast<double>(dim);
    for (std::size_t i = 0; i < dim; ++i) dh[i] = kd_scale * (h[i] - (*teacher_features)[i]);
  } else {
    terms.cls = bce_with_logit(z.z, label);
    terms.total = terms.cls;
  }
  for (std::size_t i = 0; i < dim; ++i) {
    dh[i] = weight * (dh[i] + dz * head[i]);
    d_head[i] += weight * dz * h[i];
  }
  d_head[dim] += weight * dz;
  encoder.backward(theta, tape, dh, d_theta);
  return terms;
}

void TrainingLog::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  for (const auto& e : epochs) {
    nlohmann::ordered_json rec;
    rec["window"] = window;
    rec["mode"] = mode;
    rec["epoch"] = e.epoch;
    rec["lr"] = e.lr;
    rec["train_loss"] = e.train_loss;
    rec["train_cls"] = e.train_cls;
    rec["train_kd"] = e.train_kd;
    rec["alpha"] = alpha;
    rec["beta"] = beta;
    rec["val_loss"] = e.val_loss;
    if (std::isfinite(e.val_auc)) rec["val_auc"] = e.val_auc;
    else rec["val_auc"] = nullptr;
    rec["wall_time"] = e.wall_seconds;
    out << rec.dump() << '\n';
  }
}

namespace {

struct Samples {
  std::vector<const Tensor*> inputs;
  std::vector<int> labels;
};

Samples samples_for(std::span<const WindowedStack* const> stacks, const std::string& window) {
  Samples s;
  for (const WindowedStack* stack : stacks) {
    auto it = stack->arrays.find(window);
    if (it == stack->arrays.end()) {
      throw Error(ErrorKind::kWindowSetMismatch, "patient " + stack->patient_id + " lacks window '" + window + "'");
    }
    s.inputs.push_back(&it->second);
    s.labels.push_back(stack->label);
  }
  return s;
}

double safe_auc(std::span<const double> scores, std::span<const int> labels) {
  try {
    return compute_auc(scores, labels);
  } catch (const Error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

void check_finite(double loss, const std::string& window, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw Error(ErrorKind::kDivergence,
                "non-finite loss while training '" + window + "' at epoch " + std::to_string(epoch));
  }
}

std::vector<std::vector<double>> features_of(const EncoderState& state, const Samples& samples) {
  const Encoder encoder(state.config);
  std::vector<std::vector<double>> out;
  out.reserve(samples.inputs.size());
  for (const Tensor* x : samples.inputs) out.push_back(encoder.forward(state.encoder_params, *x, nullptr));
  return out;
}

// Shared loop for supervised and distilled training; `teacher` selects the objective.
TrainResult run_training(const std::string& window, const EncoderState* teacher, const TrainingData& data,
                         const EncoderConfig& encoder_config, const TrainConfig& cfg) {
  cfg.validate();
  const Samples train = samples_for(data.train.stacks, window);
  const Samples val = samples_for(data.validation.stacks, window);
  if (train.inputs.empty()) throw Error(ErrorKind::kEmptyTrainingSet, "no training samples for '" + window + "'");
  if (val.inputs.empty()) throw Error(ErrorKind::kEmptyPartition, "no validation samples for '" + window + "'");

  std::vector<std::vector<double>> teacher_train, teacher_val;
  if (teacher) {
    if (teacher->config.feature_dim != encoder_config.feature_dim) {
      throw Error(ErrorKind::kDimensionMismatch, "teacher and student feature dimensions differ");
    }
    // Frozen teacher: its features are fixed, so compute them once.
    teacher_train = features_of(*teacher, samples_for(data.train.stacks, teacher->window_name));
    teacher_val = features_of(*teacher, samples_for(data.validation.stacks, teacher->window_name));
  }

  const Encoder encoder(encoder_config);
  EncoderState state = build_encoder(encoder_config, derive_seed(cfg.seed, "init/" + window), window);
  if (teacher && teacher->norm_stats && teacher->norm_stats->window == window) state.norm_stats = teacher->norm_stats;
  Adam opt_theta(state.encoder_params.size(), cfg);
  Adam opt_head(state.head_params.size(), cfg);
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle/" + window));
  EarlyStopping stopper(cfg.early_stop_patience, cfg.min_improvement);

  TrainResult result;
  result.log.window = window;
  result.log.mode = teacher ? "distilled" : "supervised";
  result.log.alpha = teacher ? cfg.alpha : 1.0;
  result.log.beta = teacher ? cfg.beta : 0.0;
  result.state = state;

  std::vector<std::size_t> order(train.inputs.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> d_theta(state.encoder_params.size());
  std::vector<double> d_head(state.head_params.size());
  Tape tape;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossTerms sum;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double weight = 1.0 / static_cast<double>(stop - start);
      std::fill(d_theta.begin(), d_theta.end(), 0.0);
      std::fill(d_head.begin(), d_head.end(), 0.0);
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t i = order[b];
        const LossTerms t = accumulate_gradients(encoder, state.encoder_params, state.head_params,
                                                 *train.inputs[i], train.labels[i],
                                                 teacher ? &teacher_train[i] : nullptr, cfg, weight,
                                                 d_theta, d_head, tape);
        check_finite(t.total, window, epoch + 1);
        sum.total += t.total;
        sum.cls += t.cls;
        sum.kd += t.kd;
      }
      opt_theta.step(state.encoder_params, d_theta, lr);
      opt_head.step(state.head_params, d_head, lr);
      ++result.log.steps;
    }

    double val_loss = 0.0;
    std::vector<double> probs(val.inputs.size());
    for (std::size_t i = 0; i < val.inputs.size(); ++i) {
      const auto h = encoder.forward(state.encoder_params, *val.inputs[i], nullptr);
      const Logit z = forward_logit(state.head_params, h);
      probs[i] = z.probability();
      val_loss += teacher ? distill_loss(h, teacher_val[i], z, val.labels[i], cfg).total
                          : bce_with_logit(z.z, val.labels[i]);
    }
    val_loss /= static_cast<double>(val.inputs.size());
    check_finite(val_loss, window, epoch + 1);

    const double n = static_cast<double>(train.inputs.size());
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = sum.total / n;
    rec.train_cls = sum.cls / n;
    rec.train_kd = sum.kd / n;
    rec.val_loss = val_loss;
    rec.val_auc = safe_auc(probs, val.labels);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.epochs.push_back(rec);

    if (stopper.update(val_loss)) {
      result.state = state;
      result.best_val_auc = rec.val_auc;
    }
    if (stopper.should_stop()) {
      result.log.stopped_early = true;
      break;
    }
  }
  result.log.best_epoch = stopper.best_epoch();
  result.state.trainable = false;
  return result;
}

}  // namespace

TrainResult train_supervised(const std::string& window, const TrainingData& data,
                             const EncoderConfig& encoder_config, const TrainConfig& cfg) {
  return run_training(window, nullptr, data, encoder_config, cfg);
}

TrainResult train_distilled(const std::string& student_window, const EncoderState& teacher,
                            const TrainingData& data, const EncoderConfig& encoder_config,
                            const TrainConfig& cfg) {
  if (teacher.trainable) {
    throw Error(ErrorKind::kTeacherNotFrozen, "teacher '" + teacher.window_name + "' must be frozen");
  }
  if (teacher.window_name == student_window) {
    throw Error(ErrorKind::kInvalidArgument, "student window equals the teacher window");
  }
  return run_training(student_window, &teacher, data, encoder_config, cfg);
}

TeacherSelection select_teacher(const std::map<std::string, double>& val_auc,
                                const std::vector<std::string>& canonical_order) {
  if (val_auc.empty()) throw Error(ErrorKind::kEmptyMetrics, "no validation metrics supplied");
  if (val_auc.size() < 2) throw Error(ErrorKind::kInvalidArgument, "teacher selection needs K >= 2 windows");
  for (const auto& [name, auc] : val_auc) {
    if (!std::isfinite(auc)) throw Error(ErrorKind::kInvalidArgument, "AUC for '" + name + "' is not finite");
    if (std::find(canonical_order.begin(), canonical_order.end(), name) == canonical_order.end()) {
      throw Error(ErrorKind::kWindowSetMismatch, "window '" + name + "' is not in the canonical order");
    }
  }
  TeacherSelection sel;
  sel.val_auc = val_auc;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& name : canonical_order) {
    auto it = val_auc.find(name);
    if (it != val_auc.end() && it->second > best) {
      best = it->second;
      sel.teacher = name;
    }
  }
  for (const auto& name : canonical_order) {
    if (val_auc.count(name) && name != sel.teacher) sel.students.push_back(name);
  }
  return sel;
}

double validation_auc(const EncoderState& state, const ValidationPartition& validation) {
  const Samples val = samples_for(validation.stacks, state.window_name);
  const Encoder encoder(state.config);
  std::vector<double> probs;
  for (const Tensor* x : val.inputs) {
    probs.push_back(forward_logit(state, encoder.forward(state.encoder_params, *x, nullptr)).probability());
  }
  return compute_auc(probs, val.labels);
}

MetricsReport transfer_direct(const Pipeline& pipeline, const WindowSet& target_windows,
                              std::span<const WindowedStack* const> target, std::size_t n_bootstrap,
                              std::uint64_t seed) {
  const Predictions p = predict_pipeline(pipeline, target_windows, target);
  return evaluate_predictions(p.ids, p.labels, p.probabilities, n_bootstrap, seed);
}

FinetuneResult transfer_finetune_heads(const Pipeline& pipeline, const WindowSet& target_windows,
                                       const TrainPartition& target_train,
                                       const ValidationPartition& target_val, const TrainConfig& cfg,
                                       std::size_t n_bootstrap, std::uint64_t seed) {
  cfg.validate();
  if (!(pipeline.windows == target_windows)) {
    throw Error(ErrorKind::kWindowSetMismatch,
                "pipeline '" + pipeline.name + "' was built for a different window set");
  }
  FinetuneResult out;
  out.pipeline = pipeline;
  for (auto& model : out.pipeline.models) {
    EncoderState& state = model.state;
    const Samples train = samples_for(target_train.stacks, state.window_name);
    const Samples val = samples_for(target_val.stacks, state.window_name);
    if (train.inputs.empty() || val.inputs.empty()) {
      throw Error(ErrorKind::kEmptyPartition, "head fine-tuning needs target train and validation data");
    }
    const auto f_train = features_of(state, train);
    const auto f_val = features_of(state, val);
    const std::size_t dim = state.config.feature_dim;

    std::vector<double> head = state.head_params;
    std::vector<double> best = head;
    Adam opt(head.size(), cfg);
    Rng rng(derive_seed(cfg.seed, "head/" + state.window_name));
    EarlyStopping stopper(cfg.early_stop_patience, cfg.min_improvement);
    TrainingLog log;
    log.window = state.window_name;
    log.mode = "head";
    std::vector<std::size_t> order(f_train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> grad(head.size());

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
      std::shuffle(order.begin(), order.end(), rng);
      double train_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
        const double weight = 1.0 / static_cast<double>(stop - start);
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t b = start; b < stop; ++b) {
          const std::size_t i = order[b];
          const Logit z = forward_logit(head, f_train[i]);
          train_loss += bce_with_logit(z.z, train.labels[i]);
          const double dz = weight * (z.probability() - train.labels[i]);
          for (std::size_t j = 0; j < dim; ++j) grad[j] += dz * f_train[i][j];
          grad[dim] += dz;
        }
        opt.step(head, grad, lr);
        ++log.steps;
      }
      double val_loss = 0.0;
      std::vector<double> probs;
      for (std::size_t i = 0; i < f_val.size(); ++i) {
        const Logit z = forward_logit(head, f_val[i]);
        val_loss += bce_with_logit(z.z, val.labels[i]);
        probs.push_back(z.probability());
      }
      val_loss /= static_cast<double>(f_val.size());
      check_finite(val_loss, state.window_name, epoch + 1);
      EpochRecord rec;
      rec.epoch = epoch + 1;
      rec.lr = lr;
      rec.train_loss = rec.train_cls = train_loss / static_cast<double>(f_train.size());
      rec.val_loss = val_loss;
      rec.val_auc = safe_auc(probs, val.labels);
      log.epochs.push_back(rec);
      if (stopper.update(val_loss)) best = head;
      if (stopper.should_stop()) {
        log.stopped_early = true;
        break;
      }
    }
    log.best_epoch = stopper.best_epoch();
    state.head_params = best;
    state.trainable = false;
    out.logs.push_back(std::move(log));
  }
  const Predictions p = predict_pipeline(out.pipeline, target_windows, target_val.stacks);
  out.report = evaluate_predictions(p.ids, p.labels, p.probabilities, n_bootstrap, seed);
  return out;
}

}  // namespace xwd
