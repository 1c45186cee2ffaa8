#include "xwd/serialization.hpp"

#include <algorithm>

#include "xwd/error.hpp"

namespace xwd {

using nlohmann::json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

}  // namespace

void require_known_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& context) {
  if (!j.is_object()) throw Error(ErrorKind::kInvalidConfig, context + " must be an object");
  for (const auto& item : j.items()) {
    const bool ok = std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; });
    if (!ok) throw Error(ErrorKind::kInvalidConfig, "unknown key '" + item.key() + "' in " + context);
  }
}

void to_json(json& j, BlockKind k) { j = k == BlockKind::kBasic ? "basic" : "bottleneck"; }

void from_json(const json& j, BlockKind& k) {
  const auto s = j.get<std::string>();
  if (s == "basic") k = BlockKind::kBasic;
  else if (s == "bottleneck") k = BlockKind::kBottleneck;
  else throw Error(ErrorKind::kInvalidConfig, "unknown block kind '" + s + "'");
}

void to_json(json& j, TaskMode m) { j = to_string(m); }
void from_json(const json& j, TaskMode& m) { m = parse_task_mode(j.get<std::string>()); }

void to_json(json& j, const EncoderConfig& c) {
  j = json{{"feature_dim", c.feature_dim},       {"stem_channels", c.stem_channels},
           {"stem_kernel", c.stem_kernel},       {"stem_stride", c.stem_stride},
           {"stage_channels", c.stage_channels}, {"blocks_per_stage", c.blocks_per_stage},
           {"stage_strides", c.stage_strides},   {"block", c.block},
           {"bottleneck_divisor", c.bottleneck_divisor}, {"input_shape", c.input_shape},
           {"se_reduction", c.se_reduction}};
}

void from_json(const json& j, EncoderConfig& c) {
  require_known_keys(j, {"preset", "feature_dim", "stem_channels", "stem_kernel", "stem_stride", "stage_channels",
                         "blocks_per_stage", "stage_strides", "block", "bottleneck_divisor", "input_shape",
                         "se_reduction"},
                     "encoder");
  if (auto it = j.find("preset"); it != j.end()) {
    const auto preset = it->get<std::string>();
    std::array<std::size_t, 3> shape = c.input_shape;
    read(j, "input_shape", shape);
    if (preset == "tiny") c = EncoderConfig::tiny(shape);
    else if (preset == "se_resnet50") c = EncoderConfig::se_resnet50(shape);
    else throw Error(ErrorKind::kInvalidConfig, "unknown encoder preset '" + preset + "'");
  }
  read(j, "feature_dim", c.feature_dim);
  read(j, "stem_channels", c.stem_channels);
  read(j, "stem_kernel", c.stem_kernel);
  read(j, "stem_stride", c.stem_stride);
  read(j, "stage_channels", c.stage_channels);
  read(j, "blocks_per_stage", c.blocks_per_stage);
  read(j, "stage_strides", c.stage_strides);
  read(j, "block", c.block);
  read(j, "bottleneck_divisor", c.bottleneck_divisor);
  read(j, "input_shape", c.input_shape);
  read(j, "se_reduction", c.se_reduction);
}

void to_json(json& j, const NormStats& s) {
  j = json{{"window", s.window}, {"mean", s.mean}, {"stddev", s.stddev}, {"epsilon", s.epsilon}};
}

void from_json(const json& j, NormStats& s) {
  s.window = j.at("window").get<std::string>();
  s.mean = j.at("mean").get<double>();
  s.stddev = j.at("stddev").get<double>();
  read(j, "epsilon", s.epsilon);
}

void to_json(json& j, const WindowSpec& w) {
  j = json{{"name", w.name}, {"width_hu", w.width_hu}, {"level_hu", w.level_hu}};
}

void from_json(const json& j, WindowSpec& w) {
  require_known_keys(j, {"name", "width_hu", "level_hu"}, "window");
  w.name = j.at("name").get<std::string>();
  w.width_hu = j.at("width_hu").get<double>();
  w.level_hu = j.at("level_hu").get<double>();
}

void to_json(json& j, const TissueClass& t) {
  j = json{{"mean_hu", t.mean_hu}, {"stddev_hu", t.stddev_hu}, {"fraction", t.fraction}};
}

void from_json(const json& j, TissueClass& t) {
  require_known_keys(j, {"mean_hu", "stddev_hu", "fraction"}, "tissue class");
  t.mean_hu = j.at("mean_hu").get<double>();
  t.stddev_hu = j.at("stddev_hu").get<double>();
  t.fraction = j.at("fraction").get<double>();
}

void to_json(json& j, const PhantomSpec& s) {
  j = json{{"n_patients", s.n_patients},
           {"class_balance", s.class_balance},
           {"signal_band_hu", {s.signal_low_hu, s.signal_high_hu}},
           {"signal_texture_amplitude", s.signal_texture_amplitude},
           {"background_tissue_mix", s.background_tissue_mix},
           {"rng_seed", s.rng_seed},
           {"slices", s.slices},
           {"rows", s.rows},
           {"cols", s.cols},
           {"signal_radius_fraction", s.signal_radius_fraction},
           {"scanner_noise_hu", s.scanner_noise_hu}};
}

void from_json(const json& j, PhantomSpec& s) {
  require_known_keys(j, {"n_patients", "class_balance", "signal_band_hu", "signal_texture_amplitude",
                         "background_tissue_mix", "rng_seed", "slices", "rows", "cols", "signal_radius_fraction",
                         "scanner_noise_hu"},
                     "phantom");
  read(j, "n_patients", s.n_patients);
  read(j, "class_balance", s.class_balance);
  if (auto it = j.find("signal_band_hu"); it != j.end()) {
    const auto band = it->get<std::vector<double>>();
    if (band.size() != 2) throw Error(ErrorKind::kInvalidConfig, "signal_band_hu needs two values");
    s.signal_low_hu = band[0];
    s.signal_high_hu = band[1];
  }
  read(j, "signal_texture_amplitude", s.signal_texture_amplitude);
  read(j, "background_tissue_mix", s.background_tissue_mix);
  read(j, "rng_seed", s.rng_seed);
  read(j, "slices", s.slices);
  read(j, "rows", s.rows);
  read(j, "cols", s.cols);
  read(j, "signal_radius_fraction", s.signal_radius_fraction);
  read(j, "scanner_noise_hu", s.scanner_noise_hu);
}

void to_json(json& j, const SamplingPlan& p) {
  j = json{{"task_mode", p.task_mode},
           {"target_slices", p.target_slices},
           {"region_start_fraction", p.region_start_fraction},
           {"trim_fraction", p.trim_fraction}};
}

void from_json(const json& j, SamplingPlan& p) {
  require_known_keys(j, {"task_mode", "target_slices", "region_start_fraction", "trim_fraction"}, "sampling");
  if (auto it = j.find("task_mode"); it != j.end()) {
    p = it->get<TaskMode>() == TaskMode::kFocal ? SamplingPlan::focal() : SamplingPlan::diffuse();
  }
  read(j, "target_slices", p.target_slices);
  read(j, "region_start_fraction", p.region_start_fraction);
  read(j, "trim_fraction", p.trim_fraction);
}

void to_json(json& j, const SplitFractions& f) {
  j = json{{"train", f.train}, {"validation", f.validation}, {"test", f.test}};
}

void from_json(const json& j, SplitFractions& f) {
  require_known_keys(j, {"train", "validation", "test"}, "split");
  read(j, "train", f.train);
  read(j, "validation", f.validation);
  read(j, "test", f.test);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"early_stop_patience", c.early_stop_patience},
           {"alpha", c.alpha},
           {"beta", c.beta},
           {"seed", c.seed},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_epsilon", c.adam_epsilon},
           {"min_improvement", c.min_improvement}};
}

void from_json(const json& j, TrainConfig& c) {
  require_known_keys(j, {"lr", "epochs", "batch_size", "early_stop_patience", "alpha", "beta", "seed", "adam_beta1",
                         "adam_beta2", "adam_epsilon", "min_improvement"},
                     "training");
  read(j, "lr", c.lr);
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "early_stop_patience", c.early_stop_patience);
  read(j, "alpha", c.alpha);
  read(j, "beta", c.beta);
  read(j, "seed", c.seed);
  read(j, "adam_beta1", c.adam_beta1);
  read(j, "adam_beta2", c.adam_beta2);
  read(j, "adam_epsilon", c.adam_epsilon);
  read(j, "min_improvement", c.min_improvement);
}

void to_json(json& j, const MetaLearner& m) {
  j = json{{"windows", m.windows},         {"weights", m.weights},
           {"bias", m.bias},               {"l2_strength", m.l2_strength},
           {"iterations", m.iterations},   {"gradient_norm", m.gradient_norm}};
}

void from_json(const json& j, MetaLearner& m) {
  m.windows = j.at("windows").get<std::vector<std::string>>();
  m.weights = j.at("weights").get<std::vector<double>>();
  m.bias = j.at("bias").get<double>();
  read(j, "l2_strength", m.l2_strength);
  read(j, "iterations", m.iterations);
  read(j, "gradient_norm", m.gradient_norm);
}

}  // namespace xwd
