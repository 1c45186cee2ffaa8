#include "xwd/orchestrator.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <set>

#include "xwd/analysis.hpp"
#include "xwd/ensemble.hpp"
#include "xwd/error.hpp"
#include "xwd/hash.hpp"
#include "xwd/random.hpp"
#include "xwd/serialization.hpp"
#include "xwd/volume_io.hpp"

namespace xwd {

namespace fs = std::filesystem;
using nlohmann::json;

// --- configuration ----------------------------------------------------------

namespace {

json source_to_json(const DataSource& src) {
  json j;
  j["source"] = src.kind;
  if (src.kind == "phantom") {
    json p = src.phantom;
    p.erase("rng_seed");
    j["phantom"] = p;
  } else {
    j["path"] = src.path.string();
  }
  j["flip_labels"] = src.flip_labels;
  return j;
}

DataSource source_from_json(const json& j, const std::string& context) {
  require_known_keys(j, {"source", "path", "phantom", "flip_labels"}, context);
  DataSource src;
  src.kind = j.value("source", std::string("phantom"));
  if (src.kind == "phantom") {
    if (j.contains("path")) throw Error(ErrorKind::kInvalidConfig, context + ": phantom source takes no path");
    src.phantom = PhantomSpec::mechanism_default();
    if (auto it = j.find("phantom"); it != j.end()) {
      if (it->contains("rng_seed")) {
        throw Error(ErrorKind::kInvalidConfig, context + ": phantom seed is derived from the root seed");
      }
      from_json(*it, src.phantom);
    }
  } else if (src.kind == "series") {
    if (!j.contains("path")) throw Error(ErrorKind::kInvalidConfig, context + ": series source needs a path");
    src.path = j.at("path").get<std::string>();
  } else {
    throw Error(ErrorKind::kInvalidConfig, context + ": unknown source '" + src.kind + "'");
  }
  src.flip_labels = j.value("flip_labels", false);
  return src;
}

void check_fractions(const SplitFractions& f, const std::string& context) {
  if (f.train <= 0.0 || f.validation <= 0.0 || f.test <= 0.0 ||
      std::abs(f.train + f.validation + f.test - 1.0) > 1e-9) {
    throw Error(ErrorKind::kInvalidConfig, context + " fractions must be positive and sum to 1");
  }
}

}  // namespace

WindowSet ExperimentConfig::window_set() const {
  if (windows) return WindowSet(*windows);
  return default_window_set(sampling.task_mode);
}

void ExperimentConfig::validate() const {
  try {
    if (schema_version != kConfigSchemaVersion) {
      throw Error(ErrorKind::kInvalidConfig, "unsupported schema_version " + std::to_string(schema_version));
    }
    sampling.validate();
    encoder.validate();
    training.validate();
    (void)window_set();
    check_fractions(split, "split");
    if (data.kind == "phantom") data.phantom.validate();
    if (encoder.input_shape[0] != sampling.target_slices) {
      throw Error(ErrorKind::kInvalidConfig, "encoder input depth must equal sampling.target_slices");
    }
    if (!(meta_l2 > 0.0)) throw Error(ErrorKind::kInvalidConfig, "ensemble.l2_strength must be positive");
    if (n_bootstrap == 0) throw Error(ErrorKind::kInvalidConfig, "analysis.n_bootstrap must be positive");
    if (transfer) {
      check_fractions(transfer->split, "transfer.split");
      if (!(transfer->head_lr > 0.0) || transfer->head_epochs == 0) {
        throw Error(ErrorKind::kInvalidConfig, "transfer head_lr and head_epochs must be positive");
      }
      if (transfer->target.kind == "phantom") transfer->target.phantom.validate();
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kInvalidConfig) throw;
    throw Error(ErrorKind::kInvalidConfig, e.what());
  }
}

json ExperimentConfig::canonical() const {
  json j;
  j["schema_version"] = schema_version;
  j["seed"] = seed;
  j["data"] = source_to_json(data);
  j["sampling"] = sampling;
  if (windows) j["windows"] = *windows;
  j["encoder"] = encoder;
  json t = training;
  t.erase("seed");
  j["training"] = t;
  j["split"] = split;
  j["ensemble"] = {{"l2_strength", meta_l2}};
  j["analysis"] = {{"n_bootstrap", n_bootstrap}, {"attention_maps", attention_maps}};
  if (transfer) {
    j["transfer"] = {{"target", source_to_json(transfer->target)},
                     {"split", transfer->split},
                     {"head_lr", transfer->head_lr},
                     {"head_epochs", transfer->head_epochs}};
  }
  return j;
}

std::string ExperimentConfig::hash() const { return sha256_hex(canonical().dump()); }

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    require_known_keys(j, {"schema_version", "seed", "output_dir", "data", "sampling", "windows", "encoder",
                           "training", "split", "ensemble", "analysis", "transfer"},
                       "config");
    c.schema_version = j.value("schema_version", kConfigSchemaVersion);
    c.seed = j.value("seed", std::uint64_t{0});
    if (auto it = j.find("output_dir"); it != j.end()) c.output_dir = it->get<std::string>();
    c.data = source_from_json(j.value("data", json::object()), "data");
    if (auto it = j.find("sampling"); it != j.end()) xwd::from_json(*it, c.sampling);
    if (auto it = j.find("windows"); it != j.end()) c.windows = it->get<std::vector<WindowSpec>>();
    c.encoder = EncoderConfig::tiny({c.sampling.target_slices, 64, 64});
    if (auto it = j.find("encoder"); it != j.end()) xwd::from_json(*it, c.encoder);
    if (auto it = j.find("training"); it != j.end()) {
      if (it->contains("seed")) throw Error(ErrorKind::kInvalidConfig, "training seed is derived from the root seed");
      xwd::from_json(*it, c.training);
    }
    if (auto it = j.find("split"); it != j.end()) xwd::from_json(*it, c.split);
    if (auto it = j.find("ensemble"); it != j.end()) {
      require_known_keys(*it, {"l2_strength"}, "ensemble");
      c.meta_l2 = it->value("l2_strength", c.meta_l2);
    }
    if (auto it = j.find("analysis"); it != j.end()) {
      require_known_keys(*it, {"n_bootstrap", "attention_maps"}, "analysis");
      c.n_bootstrap = it->value("n_bootstrap", c.n_bootstrap);
      c.attention_maps = it->value("attention_maps", c.attention_maps);
    }
    if (auto it = j.find("transfer"); it != j.end() && !it->is_null()) {
      require_known_keys(*it, {"target", "split", "head_lr", "head_epochs"}, "transfer");
      TransferConfig t;
      t.target = source_from_json(it->at("target"), "transfer.target");
      if (auto s = it->find("split"); s != it->end()) xwd::from_json(*s, t.split);
      t.head_lr = it->value("head_lr", t.head_lr);
      t.head_epochs = it->value("head_epochs", t.head_epochs);
      c.transfer = t;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kInvalidConfig, e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kInvalidConfig) throw;
    throw Error(ErrorKind::kInvalidConfig, e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kInvalidConfig, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kInvalidConfig, path.string() + ": " + e.what());
  }
  ExperimentConfig c = from_json(j);
  if (!c.output_dir.empty() && c.output_dir.is_relative()) c.output_dir = path.parent_path() / c.output_dir;
  return c;
}

fs::path resolve_output_dir(const ExperimentConfig& config) {
  if (!config.output_dir.empty()) return config.output_dir;
  if (const char* env = std::getenv("XWD_OUTPUT_DIR"); env && *env) return fs::path(env);
  throw Error(ErrorKind::kInvalidConfig, "no output_dir in config and XWD_OUTPUT_DIR is unset");
}

// --- stages -----------------------------------------------------------------

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::kPreprocess: return "preprocess";
    case Stage::kTrainBaselines: return "train-baselines";
    case Stage::kSelectTeacher: return "select-teacher";
    case Stage::kDistill: return "distill";
    case Stage::kEnsemble: return "ensemble";
    case Stage::kTransfer: return "transfer";
    case Stage::kAnalyze: return "analyze";
  }
  return "unknown";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : all_stages()) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorKind::kInvalidArgument, "unknown stage '" + name + "'");
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages = {Stage::kPreprocess, Stage::kTrainBaselines, Stage::kSelectTeacher,
                                            Stage::kDistill,    Stage::kEnsemble,       Stage::kTransfer,
                                            Stage::kAnalyze};
  return stages;
}

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string rel(const fs::path& p) { return p.generic_string(); }

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kIo, path.string() + ": " + e.what());
  }
}

// Digest of every regular file under a series root, in path order.
std::string hash_tree(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error(ErrorKind::kIo, "series root " + root.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += rel(fs::relative(f, root)) + ':' + sha256_file(f) + '\n';
  return sha256_hex(acc);
}

std::vector<HUVolume> load_volumes(const DataSource& src, std::uint64_t phantom_seed) {
  std::vector<HUVolume> out;
  if (src.kind == "phantom") {
    PhantomSpec spec = src.phantom;
    spec.rng_seed = phantom_seed;
    for (auto& c : generate_phantoms(spec)) out.push_back(to_hu(orient(to_raw_series(c.volume))));
  } else {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(src.path)) {
      if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) out.push_back(to_hu(load_series(d)));
  }
  if (src.flip_labels) {
    for (auto& v : out) v.label = 1 - v.label;
  }
  return out;
}

struct Dataset {
  std::vector<WindowedStack> stacks;
  DatasetSplit split;

  template <PartitionRole Role>
  PartitionView<Role> view() const {
    std::map<std::string, const WindowedStack*> by_id;
    for (const auto& s : stacks) by_id[s.patient_id] = &s;
    PartitionView<Role> v;
    for (const auto& id : split.ids(Role)) v.stacks.push_back(by_id.at(id));
    return v;
  }
  TrainingData training() const { return {view<PartitionRole::kTrain>(), view<PartitionRole::kValidation>()}; }
};

json norm_stats_json(const WindowSet& ws, const std::map<std::string, NormStats>& stats) {
  json arr = json::array();
  for (const auto& w : ws.windows()) {
    const auto& s = stats.at(w.name);
    arr.push_back({{"name", w.name},
                   {"width_hu", w.width_hu},
                   {"level_hu", w.level_hu},
                   {"mean", s.mean},
                   {"stddev", s.stddev},
                   {"epsilon", s.epsilon}});
  }
  return arr;
}

}  // namespace

struct Experiment::Impl {
  Experiment& ex;
  int lock_fd = -1;
  fs::path lock_path;
  RunStats stats;
  std::optional<Dataset> source;
  std::optional<Dataset> target;

  explicit Impl(Experiment& e) : ex(e) {}

  const ExperimentConfig& cfg() const { return ex.config_; }
  fs::path path(const std::string& r) const { return ex.root_ / r; }
  std::uint64_t seed(const std::string& name) const { return derive_seed(cfg().seed, name); }

  TrainConfig train_config() const {
    TrainConfig t = cfg().training;
    t.seed = seed("training");
    return t;
  }

  void save_manifest() { write_json(path("manifest.json"), ex.manifest_); }

  void event(const std::string& stage, const std::string& unit, const std::string& action) {
    ex.manifest_["events"].push_back({{"stage", stage}, {"unit", unit}, {"action", action}, {"at", utc_now()}});
    (action == "executed" ? stats.executed : stats.skipped).push_back(unit);
  }

  // --- unit bookkeeping ---

  bool outputs_valid(const json& rec) const {
    for (const auto& [r, sha] : rec.at("outputs").items()) {
      const fs::path p = path(r);
      if (!fs::exists(p) || sha256_file(p) != sha.get<std::string>()) return false;
    }
    if (auto it = rec.find("index"); it != rec.end()) {
      const json index = read_json(path(it->get<std::string>()));
      for (const auto& [r, sha] : index.items()) {
        const fs::path p = path(r);
        if (!fs::exists(p) || sha256_file(p) != sha.get<std::string>()) return false;
      }
    }
    return true;
  }

  bool up_to_date(const std::string& unit, const std::string& input_hash) const {
    const auto& units = ex.manifest_["units"];
    auto it = units.find(unit);
    if (it == units.end() || it->value("input_hash", "") != input_hash) return false;
    return outputs_valid(*it);
  }

  void record(const std::string& unit, const std::string& input_hash, const std::vector<std::string>& outputs,
              const std::string& index = "") {
    json rec;
    rec["input_hash"] = input_hash;
    rec["outputs"] = json::object();
    for (const auto& r : outputs) rec["outputs"][r] = sha256_file(path(r));
    if (!index.empty()) rec["index"] = index;
    ex.manifest_["units"][unit] = rec;
  }

  std::string output_hash(const std::string& unit) const {
    return sha256_hex(ex.manifest_.at("units").at(unit).at("outputs").dump());
  }

  void require(const std::string& stage, const std::string& unit, const std::string& producer) const {
    const auto& units = ex.manifest_["units"];
    auto it = units.find(unit);
    if (it == units.end() || !outputs_valid(*it)) {
      throw Error(ErrorKind::kStageFailure, "stage '" + stage + "' requires stage '" + producer +
                                                "' to have completed (missing " + unit + ")");
    }
  }

  void mark_stage(Stage s, const std::string& status) {
    ex.manifest_["stages"][to_string(s)] = {{"status", status}, {"at", utc_now()}};
  }

  // --- data ---

  struct PreparedData {
    std::vector<std::string> outputs;
    std::string index;
    json windows;
    json split_sizes;
  };

  // Windowed and normalized volumes under `prefix`; statistics are fitted on the
  // training partition unless `fixed` is given.
  PreparedData prepare(const DataSource& src, const std::string& prefix, const std::string& seed_prefix,
                       const SplitFractions& fractions, const std::map<std::string, NormStats>* fixed) {
    const WindowSet ws = cfg().window_set();
    const auto& shape = cfg().encoder.input_shape;
    std::vector<WindowedStack> raw;
    std::vector<std::string> ids;
    for (const auto& vol : load_volumes(src, seed(seed_prefix + "phantom"))) {
      HUVolume v = trim_and_sample(vol, cfg().sampling);
      if (v.voxels.height() != shape[1] || v.voxels.width() != shape[2]) v = resize_slices(v, shape[1], shape[2]);
      ids.push_back(v.patient_id);
      raw.push_back(make_windowed_stack(v, ws));
    }
    const DatasetSplit split = split_patients(ids, fractions, seed(seed_prefix + "split"));
    std::map<std::string, NormStats> stats;
    if (fixed) {
      stats = *fixed;
    } else {
      Dataset tmp{raw, split};
      const auto train = tmp.view<PartitionRole::kTrain>();
      for (const auto& w : ws.windows()) stats[w.name] = fit_norm_stats(train, w.name);
    }

    json index = json::object();
    for (const auto& s : raw) {
      const WindowedStack n = normalize(s, stats);
      for (const auto& [w, arr] : n.arrays) {
        const std::string r = prefix + "data/" + s.patient_id + "." + w + ".vol";
        fs::create_directories(path(r).parent_path());
        write_vol(path(r), arr);
        index[r] = sha256_file(path(r));
      }
    }
    std::map<std::string, int> labels;
    for (const auto& s : raw) labels[s.patient_id] = s.label;
    json split_doc;
    for (PartitionRole role : {PartitionRole::kTrain, PartitionRole::kValidation, PartitionRole::kTest}) {
      json arr = json::array();
      for (const auto& id : split.ids(role)) arr.push_back({{"id", id}, {"label", labels.at(id)}});
      split_doc[to_string(role)] = arr;
    }
    PreparedData out;
    out.windows = norm_stats_json(ws, stats);
    out.split_sizes = {{"train", split.train.size()}, {"validation", split.validation.size()},
                       {"test", split.test.size()}};
    write_json(path(prefix + "preprocess/split.json"), split_doc);
    write_json(path(prefix + "preprocess/windows.json"), out.windows);
    write_json(path(prefix + "preprocess/index.json"), index);
    out.index = prefix + "preprocess/index.json";
    out.outputs = {prefix + "preprocess/split.json", prefix + "preprocess/windows.json", out.index};
    return out;
  }

  Dataset load_dataset(const std::string& prefix) const {
    const WindowSet ws = cfg().window_set();
    const json split_doc = read_json(path(prefix + "preprocess/split.json"));
    Dataset d;
    for (PartitionRole role : {PartitionRole::kTrain, PartitionRole::kValidation, PartitionRole::kTest}) {
      auto& ids = role == PartitionRole::kTrain        ? d.split.train
                  : role == PartitionRole::kValidation ? d.split.validation
                                                       : d.split.test;
      for (const auto& e : split_doc.at(to_string(role))) {
        WindowedStack s;
        s.patient_id = e.at("id").get<std::string>();
        s.label = e.at("label").get<int>();
        for (const auto& w : ws.windows()) {
          s.arrays[w.name] = read_vol(path(prefix + "data/" + s.patient_id + "." + w.name + ".vol"));
        }
        ids.push_back(s.patient_id);
        d.stacks.push_back(std::move(s));
      }
    }
    return d;
  }

  const Dataset& source_data() {
    if (!source) source = load_dataset("");
    return *source;
  }

  std::map<std::string, NormStats> source_stats() const {
    std::map<std::string, NormStats> out;
    for (const auto& e : read_json(path("preprocess/windows.json"))) {
      NormStats s;
      s.window = e.at("name").get<std::string>();
      s.mean = e.at("mean").get<double>();
      s.stddev = e.at("stddev").get<double>();
      s.epsilon = e.at("epsilon").get<double>();
      out[s.window] = s;
    }
    return out;
  }

  // --- stage bodies ---

  void preprocess() {
    json input = {{"config", cfg().canonical()}, {"phantom_seed", seed("phantom")}, {"split_seed", seed("split")}};
    if (cfg().data.kind == "series") input["series"] = hash_tree(cfg().data.path);
    const std::string ih = sha256_hex(input.dump());
    const std::string unit = "preprocess";
    if (up_to_date(unit, ih)) return event("preprocess", unit, "skipped");
    source.reset();
    const auto prepared = prepare(cfg().data, "", "", cfg().split, nullptr);
    record(unit, ih, prepared.outputs, prepared.index);
    ex.manifest_["windows"] = prepared.windows;
    ex.manifest_["split"] = prepared.split_sizes;
    event("preprocess", unit, "executed");
  }

  std::string training_input(const std::string& window, const std::string& extra) const {
    json j = {{"data", output_hash("preprocess")}, {"encoder", cfg().encoder}, {"training", train_config()},
              {"window", window}, {"extra", extra}};
    return sha256_hex(j.dump());
  }

  json summarize(const TrainResult& r, const std::string& ckpt) const {
    return {{"checkpoint", ckpt},
            {"sha256", sha256_file(path(ckpt))},
            {"best_epoch", r.log.best_epoch},
            {"epochs_run", r.log.epochs.size()},
            {"steps", r.log.steps},
            {"stopped_early", r.log.stopped_early},
            {"best_val_auc", std::isfinite(r.best_val_auc) ? json(r.best_val_auc) : json(nullptr)},
            {"alpha", r.log.alpha},
            {"beta", r.log.beta}};
  }

  void train_baselines() {
    require("train-baselines", "preprocess", "preprocess");
    for (const auto& w : cfg().window_set().names()) {
      const std::string unit = "supervised/" + w;
      const std::string ih = training_input(w, "supervised");
      if (up_to_date(unit, ih)) {
        event("train-baselines", unit, "skipped");
        continue;
      }
      const TrainResult r = train_supervised(w, source_data().training(), cfg().encoder, train_config());
      EncoderState state = r.state;
      state.norm_stats = source_stats().at(w);
      const std::string ckpt = "checkpoints/supervised/" + w + ".xwck";
      fs::create_directories(path(ckpt).parent_path());
      save_checkpoint(state, path(ckpt));
      fs::create_directories(path("logs/supervised"));
      r.log.write_jsonl(path("logs/supervised/" + w + ".jsonl"));
      stats.training_steps += r.log.steps;
      record(unit, ih, {ckpt});
      ex.manifest_["training"][unit] = summarize(r, ckpt);
      event("train-baselines", unit, "executed");
      save_manifest();
    }
  }

  void select() {
    const auto names = cfg().window_set().names();
    std::string upstream;
    for (const auto& w : names) {
      require("select-teacher", "supervised/" + w, "train-baselines");
      upstream += output_hash("supervised/" + w);
    }
    const std::string unit = "select-teacher";
    const std::string ih = sha256_hex(upstream + output_hash("preprocess"));
    if (up_to_date(unit, ih)) return event(unit, unit, "skipped");
    const auto val = source_data().view<PartitionRole::kValidation>();
    std::map<std::string, double> aucs;
    for (const auto& w : names) {
      aucs[w] = validation_auc(load_checkpoint(path("checkpoints/supervised/" + w + ".xwck")), val);
    }
    const TeacherSelection sel = select_teacher(aucs, names);
    json doc = {{"teacher", sel.teacher}, {"val_auc", sel.val_auc}, {"students", sel.students}};
    write_json(path("selection/teacher.json"), doc);
    record(unit, ih, {"selection/teacher.json"});
    ex.manifest_["teacher"] = doc;
    event(unit, unit, "executed");
  }

  std::string teacher_window() const {
    return read_json(path("selection/teacher.json")).at("teacher").get<std::string>();
  }

  void distill() {
    require("distill", "select-teacher", "select-teacher");
    const std::string tw = teacher_window();
    require("distill", "supervised/" + tw, "train-baselines");
    const fs::path teacher_path = path("checkpoints/supervised/" + tw + ".xwck");
    const EncoderState teacher = load_checkpoint(teacher_path);
    const std::string teacher_hash = sha256_file(teacher_path);
    for (const auto& w : cfg().window_set().names()) {
      if (w == tw) continue;
      const std::string unit = "distilled/" + w;
      const std::string ih = training_input(w, "distilled:" + teacher_hash);
      if (up_to_date(unit, ih)) {
        event("distill", unit, "skipped");
        continue;
      }
      const TrainResult r = train_distilled(w, teacher, source_data().training(), cfg().encoder, train_config());
      if (checkpoint_hash(teacher) != sha256_file(teacher_path)) {
        throw Error(ErrorKind::kStageFailure, "teacher checkpoint changed during distillation");
      }
      EncoderState state = r.state;
      state.norm_stats = source_stats().at(w);
      const std::string ckpt = "checkpoints/distilled/" + w + ".xwck";
      fs::create_directories(path(ckpt).parent_path());
      save_checkpoint(state, path(ckpt));
      fs::create_directories(path("logs/distilled"));
      r.log.write_jsonl(path("logs/distilled/" + w + ".jsonl"));
      stats.training_steps += r.log.steps;
      record(unit, ih, {ckpt});
      json s = summarize(r, ckpt);
      s["teacher"] = tw;
      s["teacher_sha256"] = teacher_hash;
      ex.manifest_["training"][unit] = s;
      event("distill", unit, "executed");
      save_manifest();
    }
  }

  std::vector<std::string> model_units() const {
    const std::string tw = teacher_window();
    std::vector<std::string> out;
    for (const auto& w : cfg().window_set().names()) out.push_back("supervised/" + w);
    for (const auto& w : cfg().window_set().names()) {
      if (w != tw) out.push_back("distilled/" + w);
    }
    return out;
  }

  void ensemble() {
    require("ensemble", "select-teacher", "select-teacher");
    std::string upstream = output_hash("select-teacher");
    for (const auto& u : model_units()) {
      require("ensemble", u, u.starts_with("supervised/") ? "train-baselines" : "distill");
      upstream += output_hash(u);
    }
    const std::string unit = "ensemble";
    const std::string ih = sha256_hex(upstream + std::to_string(cfg().meta_l2));
    if (up_to_date(unit, ih)) return event(unit, unit, "skipped");

    const WindowSet ws = cfg().window_set();
    const std::string tw = teacher_window();
    std::vector<BaseModel> sup, dist;
    for (const auto& w : ws.names()) {
      sup.push_back({load_checkpoint(path("checkpoints/supervised/" + w + ".xwck")), Provenance::kSupervised});
      if (w != tw) {
        dist.push_back({load_checkpoint(path("checkpoints/distilled/" + w + ".xwck")), Provenance::kDistilled});
      }
    }
    auto [sp, dp] = build_pipelines(tw, sup, dist, ws, source_data().view<PartitionRole::kValidation>(),
                                    cfg().meta_l2);
    std::vector<std::string> outputs;
    for (const Pipeline* p : {&sp, &dp}) {
      json models = json::array();
      for (const auto& m : p->models) {
        const std::string dir = m.provenance == Provenance::kDistilled ? "distilled" : "supervised";
        const std::string ckpt = "checkpoints/" + dir + "/" + m.state.window_name + ".xwck";
        models.push_back({{"window", m.state.window_name},
                          {"provenance", to_string(m.provenance)},
                          {"checkpoint", ckpt},
                          {"sha256", sha256_file(path(ckpt))}});
      }
      json doc = {{"name", p->name}, {"windows", ws.windows()}, {"models", models}, {"meta", p->meta}};
      const std::string r = "ensembles/" + p->name + ".json";
      write_json(path(r), doc);
      outputs.push_back(r);
      const ProbabilityMatrix val =
          collect_probabilities(p->model_map(), ws, source_data().view<PartitionRole::kValidation>());
      json base = json::object();
      std::vector<double> meta_scores;
      for (std::size_t k = 0; k < ws.size(); ++k) {
        std::vector<double> col;
        for (const auto& row : val.rows) col.push_back(row[k]);
        base[val.windows[k]] = compute_auc(col, val.labels);
      }
      for (const auto& row : val.rows) meta_scores.push_back(predict_ensemble(p->meta, row));
      ex.manifest_["ensembles"][p->name] = {{"meta", doc["meta"]},
                                            {"validation_auc", compute_auc(meta_scores, val.labels)},
                                            {"base_validation_auc", base}};
    }
    record(unit, ih, outputs);
    event(unit, unit, "executed");
  }

  Pipeline load_pipeline(const std::string& name) const {
    const json doc = read_json(path("ensembles/" + name + ".json"));
    Pipeline p;
    p.name = doc.at("name").get<std::string>();
    p.windows = WindowSet(doc.at("windows").get<std::vector<WindowSpec>>());
    p.meta = doc.at("meta").get<MetaLearner>();
    for (const auto& m : doc.at("models")) {
      const fs::path ckpt = path(m.at("checkpoint").get<std::string>());
      if (sha256_file(ckpt) != m.at("sha256").get<std::string>()) {
        throw Error(ErrorKind::kProvenanceMismatch, ckpt.string() + " differs from the ensemble record");
      }
      p.models.push_back({load_checkpoint(ckpt), parse_provenance(m.at("provenance").get<std::string>())});
    }
    return p;
  }

  static json report_summary(const MetricsReport& r) {
    json j;
    for (Metric m : {Metric::kAccuracy, Metric::kF1, Metric::kRecall, Metric::kPrecision, Metric::kAuc}) {
      const auto& v = r.get(m);
      j[to_string(m)] = {{"value", v.point}, {"ci_low", v.ci.low}, {"ci_high", v.ci.high}};
    }
    j["n"] = r.labels.size();
    return j;
  }

  void transfer() {
    if (!cfg().transfer) {
      ex.manifest_["transfer"] = {{"configured", false}};
      return event("transfer", "transfer", "skipped");
    }
    require("transfer", "ensemble", "ensemble");
    const TransferConfig& tc = *cfg().transfer;
    const std::string unit = "transfer";
    json input = {{"ensemble", output_hash("ensemble")},
                  {"preprocess", output_hash("preprocess")},
                  {"config", cfg().canonical()},
                  {"training", train_config()}};
    if (tc.target.kind == "series") input["series"] = hash_tree(tc.target.path);
    const std::string ih = sha256_hex(input.dump());
    if (up_to_date(unit, ih)) return event(unit, unit, "skipped");

    const auto src_stats = source_stats();
    const auto prepared = prepare(tc.target, "transfer/", "transfer/", tc.split, &src_stats);
    target = load_dataset("transfer/");
    const WindowSet ws = cfg().window_set();
    const auto test = target->view<PartitionRole::kTest>();
    TrainConfig head_cfg = train_config();
    head_cfg.lr = tc.head_lr;
    head_cfg.epochs = tc.head_epochs;
    std::vector<std::string> outputs = prepared.outputs;
    json summary = {{"configured", true}, {"split", prepared.split_sizes}};

    for (const std::string name : {"supervised", "distilled"}) {
      const Pipeline p = load_pipeline(name);
      std::vector<std::string> encoder_before;
      for (const auto& m : p.models) encoder_before.push_back(checkpoint_hash(m.state));

      const MetricsReport direct =
          transfer_direct(p, ws, test.stacks, cfg().n_bootstrap, seed("bootstrap/transfer/" + name + "/direct"));
      bool direct_unchanged = true;
      for (std::size_t k = 0; k < p.models.size(); ++k) {
        direct_unchanged = direct_unchanged && checkpoint_hash(p.models[k].state) == encoder_before[k];
      }

      const FinetuneResult ft =
          transfer_finetune_heads(p, ws, target->view<PartitionRole::kTrain>(),
                                  target->view<PartitionRole::kValidation>(), head_cfg, cfg().n_bootstrap,
                                  seed("bootstrap/transfer/" + name + "/finetune-val"));
      const MetricsReport tuned = transfer_direct(ft.pipeline, ws, test.stacks, cfg().n_bootstrap,
                                                  seed("bootstrap/transfer/" + name + "/finetuned"));
      bool encoders_unchanged = true;
      json heads = json::array();
      for (std::size_t k = 0; k < ft.pipeline.models.size(); ++k) {
        const auto& before = p.models[k].state;
        const auto& after = ft.pipeline.models[k].state;
        encoders_unchanged = encoders_unchanged && parameter_hash(before.encoder_params) ==
                                                       parameter_hash(after.encoder_params);
        const std::string ckpt = "transfer/checkpoints/" + name + "/" + after.window_name + ".xwck";
        fs::create_directories(path(ckpt).parent_path());
        save_checkpoint(after, path(ckpt));
        outputs.push_back(ckpt);
        heads.push_back({{"window", after.window_name}, {"checkpoint", ckpt}});
        stats.training_steps += ft.logs[k].steps;
        fs::create_directories(path("transfer/logs/" + name));
        ft.logs[k].write_jsonl(path("transfer/logs/" + name + "/" + after.window_name + ".jsonl"));
      }
      fs::create_directories(path("transfer/reports"));
      write_metrics_report(direct, path("transfer/reports/" + name + "_direct"));
      write_metrics_report(tuned, path("transfer/reports/" + name + "_finetuned"));
      for (const char* kind : {"_direct", "_finetuned"}) {
        outputs.push_back("transfer/reports/" + name + kind + ".json");
        outputs.push_back("transfer/reports/" + name + kind + ".csv");
      }
      summary[name] = {{"direct", report_summary(direct)},
                       {"finetuned", report_summary(tuned)},
                       {"direct_parameters_unchanged", direct_unchanged},
                       {"finetune_encoders_unchanged", encoders_unchanged},
                       {"finetuned_heads", heads}};
    }
    record(unit, ih, outputs, prepared.index);
    ex.manifest_["transfer"] = summary;
    event(unit, unit, "executed");
  }

  void analyze() {
    require("analyze", "ensemble", "ensemble");
    const std::string unit = "analyze";
    const std::string ih = sha256_hex(output_hash("ensemble") + output_hash("preprocess") +
                                      std::to_string(cfg().n_bootstrap) + ":" +
                                      std::to_string(cfg().attention_maps) + ":" + std::to_string(cfg().seed));
    if (up_to_date(unit, ih)) return event(unit, unit, "skipped");

    const WindowSet ws = cfg().window_set();
    const auto test = source_data().view<PartitionRole::kTest>();
    std::vector<std::string> outputs;
    json metrics;
    fs::create_directories(path("reports/base"));

    auto emit = [&](const MetricsReport& r, const std::string& stem) {
      write_metrics_report(r, path(stem));
      outputs.push_back(stem + ".json");
      outputs.push_back(stem + ".csv");
    };

    std::map<std::string, MetricsReport> pipelines;
    std::map<std::string, std::map<std::string, MetricsReport>> base;  // pipeline -> window -> report
    for (const std::string name : {"supervised", "distilled"}) {
      const Pipeline p = load_pipeline(name);
      const Predictions pred = predict_pipeline(p, ws, test.stacks);
      pipelines[name] = evaluate_predictions(pred.ids, pred.labels, pred.probabilities, cfg().n_bootstrap,
                                             seed("bootstrap/" + name));
      emit(pipelines[name], "reports/" + name);
      metrics["ensembles"][name] = report_summary(pipelines[name]);

      for (const auto& m : p.models) {
        const auto& st = m.state;
        const Encoder encoder(st.config);
        std::vector<double> probs;
        std::vector<int> labels;
        std::vector<std::string> ids;
        for (const auto* s : test.stacks) {
          probs.push_back(
              forward_logit(st, encoder.forward(st.encoder_params, s->arrays.at(st.window_name), nullptr))
                  .probability());
          labels.push_back(s->label);
          ids.push_back(s->patient_id);
        }
        const std::string tag = to_string(m.provenance) + "_" + st.window_name;
        base[name][st.window_name] =
            evaluate_predictions(ids, labels, probs, cfg().n_bootstrap, seed("bootstrap/base/" + tag));
        emit(base[name][st.window_name], "reports/base/" + tag);
        metrics["base"][tag] = report_summary(base[name][st.window_name]);

        const std::size_t n_maps = std::min(cfg().attention_maps, test.stacks.size());
        for (std::size_t i = 0; i < n_maps; ++i) {
          const auto* s = test.stacks[i];
          const AttentionMap map = grad_cam(st, s->arrays.at(st.window_name));
          const std::string r = "attention/" + name + "/" + st.window_name + "/" + s->patient_id + ".vol";
          fs::create_directories(path(r).parent_path());
          write_vol(path(r), map.heatmap);
          outputs.push_back(r);
        }
      }
    }

    const std::string tw = teacher_window();
    json comparisons;
    for (const auto& w : ws.names()) {
      if (w == tw) continue;
      const auto& s = base["supervised"][w];
      const auto& d = base["distilled"][w];
      const VennCounts v = venn_agreement(s.per_sample_correct, d.per_sample_correct);
      const PairedTestResult t = paired_test(true_class_probabilities(d.probabilities, d.labels),
                                             true_class_probabilities(s.probabilities, s.labels));
      comparisons[w] = {{"venn",
                         {{"corrected", v.corrected},
                          {"joint_correct", v.joint_correct},
                          {"new_errors", v.new_errors},
                          {"both_wrong", v.both_wrong}}},
                        {"paired_test", {{"statistic", t.statistic}, {"p_value", t.p_value}, {"n", t.n}}}};
    }
    {
      const auto& s = pipelines["supervised"];
      const auto& d = pipelines["distilled"];
      const PairedTestResult t = paired_test(true_class_probabilities(d.probabilities, d.labels),
                                             true_class_probabilities(s.probabilities, s.labels));
      const VennCounts v = venn_agreement(s.per_sample_correct, d.per_sample_correct);
      comparisons["ensemble"] = {{"venn",
                                  {{"corrected", v.corrected},
                                   {"joint_correct", v.joint_correct},
                                   {"new_errors", v.new_errors},
                                   {"both_wrong", v.both_wrong}}},
                                 {"paired_test", {{"statistic", t.statistic}, {"p_value", t.p_value}, {"n", t.n}}}};
    }
    // JSON has no infinity; zero-variance differences are written as strings.
    for (auto& [k, c] : comparisons.items()) {
      auto& st = c["paired_test"]["statistic"];
      if (st.is_number_float() && !std::isfinite(st.get<double>())) st = st.get<double>() > 0 ? "inf" : "-inf";
    }
    metrics["comparisons"] = comparisons;
    write_json(path("reports/analysis.json"), metrics);
    outputs.push_back("reports/analysis.json");
    record(unit, ih, outputs);
    ex.manifest_["metrics"] = metrics;
    event(unit, unit, "executed");
  }
};

Experiment::Experiment(ExperimentConfig config) : config_(std::move(config)), impl_(std::make_unique<Impl>(*this)) {
  config_.validate();
  root_ = resolve_output_dir(config_);
  fs::create_directories(root_);
  impl_->lock_path = root_ / ".lock";
  impl_->lock_fd = ::open(impl_->lock_path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (impl_->lock_fd < 0) {
    throw Error(ErrorKind::kStageFailure,
                "experiment directory " + root_.string() + " is locked by another process (" +
                    impl_->lock_path.string() + ")");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  if (::write(impl_->lock_fd, pid.data(), pid.size()) < 0) {
    // lock content is informational only
  }

  const fs::path mpath = root_ / "manifest.json";
  if (fs::exists(mpath)) {
    manifest_ = read_json(mpath);
  } else {
    manifest_ = {{"schema_version", kConfigSchemaVersion}, {"units", json::object()}, {"events", json::array()}};
  }
  manifest_["config"] = config_.canonical();
  manifest_["config_hash"] = config_.hash();
  manifest_["seeds"] = {{"root", config_.seed},
                        {"phantom", impl_->seed("phantom")},
                        {"split", impl_->seed("split")},
                        {"training", impl_->seed("training")}};
  const TrainConfig t = impl_->train_config();
  manifest_["optimizer"] = {{"name", "adam"},
                            {"beta1", t.adam_beta1},
                            {"beta2", t.adam_beta2},
                            {"epsilon", t.adam_epsilon},
                            {"schedule", "cosine-per-epoch"}};
}

Experiment::~Experiment() {
  if (impl_ && impl_->lock_fd >= 0) {
    ::close(impl_->lock_fd);
    std::error_code ec;
    fs::remove(impl_->lock_path, ec);
  }
}

RunStats Experiment::run(Stage stage) {
  impl_->stats = RunStats{};
  try {
    switch (stage) {
      case Stage::kPreprocess: impl_->preprocess(); break;
      case Stage::kTrainBaselines: impl_->train_baselines(); break;
      case Stage::kSelectTeacher: impl_->select(); break;
      case Stage::kDistill: impl_->distill(); break;
      case Stage::kEnsemble: impl_->ensemble(); break;
      case Stage::kTransfer: impl_->transfer(); break;
      case Stage::kAnalyze: impl_->analyze(); break;
    }
  } catch (const Error& e) {
    impl_->save_manifest();
    if (e.kind() == ErrorKind::kStageFailure || e.kind() == ErrorKind::kInvalidConfig) throw;
    throw Error(ErrorKind::kStageFailure, "stage '" + to_string(stage) + "' failed: " + e.what());
  } catch (const std::exception& e) {
    impl_->save_manifest();
    throw Error(ErrorKind::kStageFailure, "stage '" + to_string(stage) + "' failed: " + e.what());
  }
  impl_->mark_stage(stage, "complete");
  impl_->save_manifest();
  return impl_->stats;
}

RunStats Experiment::run_all() {
  RunStats total;
  for (Stage s : all_stages()) {
    const RunStats r = run(s);
    total.training_steps += r.training_steps;
    total.executed.insert(total.executed.end(), r.executed.begin(), r.executed.end());
    total.skipped.insert(total.skipped.end(), r.skipped.begin(), r.skipped.end());
  }
  return total;
}

std::size_t write_phantom_series(const ExperimentConfig& config, const fs::path& dir) {
  if (config.data.kind != "phantom") throw Error(ErrorKind::kInvalidConfig, "data source is not a phantom");
  PhantomSpec spec = config.data.phantom;
  spec.rng_seed = derive_seed(config.seed, "phantom");
  const auto cases = generate_phantoms(spec);
  for (const auto& c : cases) write_series(to_raw_series(c.volume), dir / c.volume.patient_id);
  return cases.size();
}

json strip_timestamps(json manifest) {
  if (manifest.is_object()) {
    manifest.erase("at");
    for (auto& [k, v] : manifest.items()) v = strip_timestamps(v);
  } else if (manifest.is_array()) {
    for (auto& v : manifest) v = strip_timestamps(v);
  }
  return manifest;
}

}  // namespace xwd
