#include "xwd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "xwd/error.hpp"
#include "xwd/random.hpp"

namespace xwd {

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) {
    throw Error(ErrorKind::kLengthMismatch,
                "lengths differ: " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

struct Confusion {
  double tp = 0, fp = 0, tn = 0, fn = 0;
};

Confusion confusion(std::span<const double> scores, std::span<const int> labels, double threshold) {
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    const bool actual = labels[i] == 1;
    if (predicted && actual) c.tp += 1;
    else if (predicted) c.fp += 1;
    else if (actual) c.fn += 1;
    else c.tn += 1;
  }
  return c;
}

}  // namespace

double compute_auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores.size(), labels.size());
  // Rank-sum with midranks for ties; equal to pairwise counting with 0.5 tie credit.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double n_pos = 0, n_neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) rank_sum += midrank;
    }
    i = j;
  }
  for (int y : labels) (y == 1 ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorKind::kSingleClass, "AUC needs both classes");
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

std::string to_string(Metric metric) {
  switch (metric) {
    case Metric::kAccuracy: return "accuracy";
    case Metric::kF1: return "f1";
    case Metric::kRecall: return "recall";
    case Metric::kPrecision: return "precision";
    case Metric::kAuc: return "auc";
  }
  return "unknown";
}

double compute_metric(Metric metric, std::span<const double> scores, std::span<const int> labels,
                      double threshold) {
  check_lengths(scores.size(), labels.size());
  if (scores.empty()) throw Error(ErrorKind::kInvalidArgument, "no samples");
  if (metric == Metric::kAuc) return compute_auc(scores, labels);
  const Confusion c = confusion(scores, labels, threshold);
  const double precision = c.tp + c.fp > 0 ? c.tp / (c.tp + c.fp) : 0.0;
  const double recall = c.tp + c.fn > 0 ? c.tp / (c.tp + c.fn) : 0.0;
  switch (metric) {
    case Metric::kAccuracy: return (c.tp + c.tn) / static_cast<double>(scores.size());
    case Metric::kPrecision: return precision;
    case Metric::kRecall: return recall;
    case Metric::kF1: return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    case Metric::kAuc: break;
  }
  return 0.0;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorKind::kInvalidArgument, "percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels, Metric metric,
                      std::size_t n_resamples, std::uint64_t seed, double threshold) {
  check_lengths(scores.size(), labels.size());
  const std::size_t n = scores.size();
  if (n < 2) throw Error(ErrorKind::kInvalidArgument, "bootstrap needs at least two samples");
  if (n_resamples == 0) throw Error(ErrorKind::kInvalidArgument, "bootstrap needs resamples");
  const bool has_pos = std::any_of(labels.begin(), labels.end(), [](int y) { return y == 1; });
  const bool has_neg = std::any_of(labels.begin(), labels.end(), [](int y) { return y != 1; });
  if (!has_pos || !has_neg) throw Error(ErrorKind::kSingleClass, "bootstrap set has a single class");

  std::vector<double> stats(n_resamples);
  std::vector<double> s(n);
  std::vector<int> y(n);
  for (std::size_t b = 0; b < n_resamples; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (int attempt = 0;; ++attempt) {
      int positives = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = pick(rng);
        s[i] = scores[j];
        y[i] = labels[j];
        positives += y[i] == 1;
      }
      const bool single = positives == 0 || positives == static_cast<int>(n);
      if (metric != Metric::kAuc || !single) break;
      if (attempt > 10000) throw Error(ErrorKind::kSingleClass, "could not draw a two-class resample");
    }
    stats[b] = compute_metric(metric, s, y, threshold);
  }
  return {percentile(stats, 0.025), percentile(stats, 0.975)};
}

const MetricValue& MetricsReport::get(Metric metric) const {
  switch (metric) {
    case Metric::kAccuracy: return accuracy;
    case Metric::kF1: return f1;
    case Metric::kRecall: return recall;
    case Metric::kPrecision: return precision;
    case Metric::kAuc: return auc;
  }
  return auc;
}

MetricsReport evaluate_predictions(std::vector<std::string> ids, std::vector<int> labels,
                                   std::vector<double> probabilities, std::size_t n_bootstrap,
                                   std::uint64_t seed) {
  check_lengths(ids.size(), labels.size());
  check_lengths(probabilities.size(), labels.size());
  MetricsReport report;
  report.n_bootstrap = n_bootstrap;
  report.seed = seed;
  const std::pair<Metric, MetricValue*> slots[] = {
      {Metric::kAccuracy, &report.accuracy}, {Metric::kF1, &report.f1},
      {Metric::kRecall, &report.recall},     {Metric::kPrecision, &report.precision},
      {Metric::kAuc, &report.auc},
  };
  for (const auto& [metric, slot] : slots) {
    slot->point = compute_metric(metric, probabilities, labels);
    slot->ci = bootstrap_ci(probabilities, labels, metric, n_bootstrap,
                            derive_seed(seed, to_string(metric)));
    // Reported intervals always bracket the point estimate.
    slot->ci.low = std::min(slot->ci.low, slot->point);
    slot->ci.high = std::max(slot->ci.high, slot->point);
  }
  report.per_sample_correct.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    report.per_sample_correct[i] = (probabilities[i] >= 0.5) == (labels[i] == 1);
  }
  report.ids = std::move(ids);
  report.labels = std::move(labels);
  report.probabilities = std::move(probabilities);
  return report;
}

void write_metrics_report(const MetricsReport& report, const std::filesystem::path& stem) {
  nlohmann::ordered_json doc;
  for (Metric m : {Metric::kAccuracy, Metric::kF1, Metric::kRecall, Metric::kPrecision, Metric::kAuc}) {
    const auto& v = report.get(m);
    doc["metrics"][to_string(m)] = {{"value", v.point}, {"ci_low", v.ci.low}, {"ci_high", v.ci.high}};
  }
  doc["n"] = report.labels.size();
  doc["n_bootstrap"] = report.n_bootstrap;
  doc["seed"] = report.seed;
  std::filesystem::path json_path = stem;
  json_path += ".json";
  std::ofstream out(json_path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + json_path.string());
  out << doc.dump(2) << '\n';

  std::filesystem::path csv_path = stem;
  csv_path += ".csv";
  std::ofstream csv(csv_path);
  if (!csv) throw Error(ErrorKind::kIo, "cannot write " + csv_path.string());
  csv << "patient_id,label,probability,correct\n" << std::setprecision(17);
  for (std::size_t i = 0; i < report.labels.size(); ++i) {
    csv << report.ids[i] << ',' << report.labels[i] << ',' << report.probabilities[i] << ','
        << (report.per_sample_correct[i] ? 1 : 0) << '\n';
  }
}

PairedTestResult paired_test(std::span<const double> a, std::span<const double> b) {
  check_lengths(a.size(), b.size());
  const std::size_t n = a.size();
  if (n < 2) throw Error(ErrorKind::kInvalidArgument, "paired test needs at least two pairs");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  PairedTestResult r;
  r.n = n;
  if (sd == 0.0 || !(sd > 1e-300)) {
    if (mean == 0.0) return r;
    r.statistic = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p_value = 0.0;
    return r;
  }
  r.statistic = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  r.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.statistic))));
  return r;
}

std::vector<double> true_class_probabilities(std::span<const double> probabilities,
                                             std::span<const int> labels) {
  check_lengths(probabilities.size(), labels.size());
  std::vector<double> out(probabilities.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = labels[i] == 1 ? probabilities[i] : 1.0 - probabilities[i];
  }
  return out;
}

VennCounts venn_agreement(const std::vector<bool>& supervised_correct,
                          const std::vector<bool>& distilled_correct) {
  check_lengths(supervised_correct.size(), distilled_correct.size());
  VennCounts v;
  for (std::size_t i = 0; i < supervised_correct.size(); ++i) {
    const bool s = supervised_correct[i], d = distilled_correct[i];
    if (!s && d) ++v.corrected;
    else if (s && d) ++v.joint_correct;
    else if (s) ++v.new_errors;
    else ++v.both_wrong;
  }
  return v;
}

// --- attention maps ---------------------------------------------------------

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;
};

std::vector<Tap> taps(std::size_t in, std::size_t out) {
  std::vector<Tap> t(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0,
                                  static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return t;
}

}  // namespace

Tensor upsample_trilinear(const Tensor& x, std::size_t d, std::size_t h, std::size_t w) {
  Tensor out(x.channels(), d, h, w);
  const auto tz = taps(x.depth(), d), ty = taps(x.height(), h), tx = taps(x.width(), w);
  for (std::size_t c = 0; c < x.channels(); ++c) {
    for (std::size_t z = 0; z < d; ++z) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t i = 0; i < w; ++i) {
          const auto& a = tz[z];
          const auto& b = ty[y];
          const auto& e = tx[i];
          auto lerp_x = [&](std::size_t zz, std::size_t yy) {
            return (1.0 - e.frac) * x.at(c, zz, yy, e.lo) + e.frac * x.at(c, zz, yy, e.hi);
          };
          const double front = (1.0 - b.frac) * lerp_x(a.lo, b.lo) + b.frac * lerp_x(a.lo, b.hi);
          const double back = (1.0 - b.frac) * lerp_x(a.hi, b.lo) + b.frac * lerp_x(a.hi, b.hi);
          out.at(c, z, y, i) = (1.0 - a.frac) * front + a.frac * back;
        }
      }
    }
  }
  return out;
}

Tensor combine_cam(const Tensor& activation, const Tensor& gradient, std::size_t d, std::size_t h,
                   std::size_t w) {
  if (!activation.same_shape(gradient)) {
    throw Error(ErrorKind::kShapeMismatch, "activation and gradient shapes differ");
  }
  Tensor cam(1, activation.depth(), activation.height(), activation.width());
  for (std::size_t c = 0; c < activation.channels(); ++c) {
    double weight = 0.0;
    for (double g : gradient.channel(c)) weight += g;
    weight /= static_cast<double>(gradient.spatial());
    const auto a = activation.channel(c);
    auto out = cam.channel(0);
    for (std::size_t n = 0; n < a.size(); ++n) out[n] += weight * a[n];
  }
  for (auto& v : cam.data()) v = std::max(0.0, v);
  Tensor up = upsample_trilinear(cam, d, h, w);
  const double peak = *std::max_element(up.data().begin(), up.data().end());
  if (!(peak > 0.0)) {
    std::fill(up.data().begin(), up.data().end(), 0.0);
    return up;
  }
  for (auto& v : up.data()) v = std::clamp(v / peak, 0.0, 1.0);
  return up;
}

AttentionMap grad_cam(const EncoderState& state, const Tensor& x, const std::string& target_layer) {
  const Encoder encoder(state.config);
  const auto names = encoder.layer_names();
  const std::string layer = target_layer.empty() ? names.back() : target_layer;
  ActivationCapture capture;
  capture.layer = encoder.layer_index(layer);
  Tape tape;
  encoder.forward(state.encoder_params, x, &tape);
  // dz/dh is the head weight vector.
  const std::span<const double> dz_dh(state.head_params.data(), state.config.feature_dim);
  encoder.backward(state.encoder_params, tape, dz_dh, {}, &capture);
  return {combine_cam(capture.activation, capture.gradient, x.depth(), x.height(), x.width()), layer};
}

}  // namespace xwd
