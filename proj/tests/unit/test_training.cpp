#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "test_util.hpp"
#include "toy_data.hpp"
#include "xwd/error.hpp"
#include "xwd/training.hpp"

using namespace xwd;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kIo;
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.lr = 3e-3;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(Training, EarlyStoppingSeries) {
  EarlyStopping es(10, 1e-6);
  std::vector<double> series = {1.0, 0.9};
  series.insert(series.end(), 10, 0.91);
  std::size_t stopped_at = 0;
  for (std::size_t e = 0; e < series.size(); ++e) {
    es.update(series[e]);
    if (es.should_stop()) {
      stopped_at = e + 1;
      break;
    }
  }
  EXPECT_EQ(stopped_at, 12u);
  EXPECT_EQ(es.best_epoch(), 2u);
  EXPECT_DOUBLE_EQ(es.best_loss(), 0.9);

  EarlyStopping tiny(2, 1e-6);
  EXPECT_TRUE(tiny.update(1.0));
  EXPECT_FALSE(tiny.update(1.0 - 1e-7));
  EXPECT_TRUE(tiny.update(0.5));
}

TEST(Training, CosineSchedule) {
  EXPECT_DOUBLE_EQ(cosine_lr(1e-3, 0, 40), 1e-3);
  EXPECT_NEAR(cosine_lr(1e-3, 20, 40), 5e-4, 1e-18);
  EXPECT_NEAR(cosine_lr(1e-3, 39, 40), 1e-3 * (1 + std::cos(std::numbers::pi * 39 / 40)) / 2, 1e-18);
  EXPECT_EQ(cosine_lr(1e-3, 40, 40), 0.0);
  for (std::size_t e = 1; e < 40; ++e) EXPECT_LT(cosine_lr(1e-3, e, 40), cosine_lr(1e-3, e - 1, 40));
}

TEST(Training, LossExamples) {
  TrainConfig cfg;
  const std::vector<double> h = {0.3, -1.0, 2.0, 0.0};
  const LossTerms same = distill_loss(h, h, Logit{0.7}, 1, cfg);
  EXPECT_EQ(same.kd, 0.0);
  EXPECT_DOUBLE_EQ(same.total, 0.5 * same.cls);

  const std::vector<double> shifted = {1.3, 0.0, 3.0, 1.0};
  EXPECT_NEAR(distill_loss(shifted, h, Logit{0.0}, 0, cfg).kd, 1.0, 1e-15);
  const LossTerms t = distill_loss(shifted, h, Logit{0.0}, 0, cfg);
  EXPECT_NEAR(t.cls, std::log(2.0), 1e-15);
  EXPECT_NEAR(t.total, 0.5 * std::log(2.0) + 0.5, 1e-15);
  EXPECT_EQ(kind_of([&] { distill_loss(std::vector<double>{1, 2}, h, Logit{}, 0, cfg); }),
            ErrorKind::kDimensionMismatch);

  EXPECT_NEAR(bce_with_logit(1000.0, 0), 1000.0, 1e-12);
  EXPECT_EQ(bce_with_logit(1000.0, 1), 0.0);
  EXPECT_NEAR(bce_with_logit(-2.0, 1), -std::log(1.0 / (1.0 + std::exp(2.0))), 1e-14);
}

TEST(Training, ConfigValidation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.lr = 0.0;
  EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::kInvalidConfig);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::kInvalidConfig);
}

TEST(Training, AdamFirstStepIsSignTimesLr) {
  TrainConfig cfg;
  Adam adam(3, cfg);
  std::vector<double> p = {0.0, 1.0, 2.0};
  const std::vector<double> g = {0.5, -3.0, 1e-3};
  adam.step(p, g, 0.1);
  EXPECT_NEAR(p[0], -0.1, 1e-6);
  EXPECT_NEAR(p[1], 1.1, 1e-6);
  EXPECT_NEAR(p[2], 2.0 - 0.1, 1e-4);
}

TEST(Training, SeparableToyFitsAndDecomposes) {
  const auto cohort = test::toy_cohort(24, 1.5, 3);
  const TrainingData data{{cohort.slice(0, 16)}, {cohort.slice(16, 24)}};
  const TrainResult r = train_supervised("a", data, test::micro_encoder(), quick_config(30));
  ASSERT_FALSE(r.log.epochs.empty());
  EXPECT_LT(r.log.epochs[r.log.best_epoch - 1].train_loss, 0.05);
  EXPECT_DOUBLE_EQ(r.best_val_auc, 1.0);
  EXPECT_FALSE(r.state.trainable);
  const double best = r.log.epochs[r.log.best_epoch - 1].val_loss;
  for (std::size_t i = 0; i < r.log.epochs.size(); ++i) {
    if (i < r.log.best_epoch) EXPECT_LE(best, r.log.epochs[i].val_loss);
    else EXPECT_LE(best - 1e-6, r.log.epochs[i].val_loss);
  }
  EXPECT_EQ(kind_of([&] { train_supervised("c", data, test::micro_encoder(), quick_config(2)); }),
            ErrorKind::kWindowSetMismatch);
  const TrainingData empty{{}, {cohort.slice(16, 24)}};
  EXPECT_EQ(kind_of([&] { train_supervised("a", empty, test::micro_encoder(), quick_config(2)); }),
            ErrorKind::kEmptyTrainingSet);
}

TEST(Training, DistillationContracts) {
  const auto cohort = test::toy_cohort(16, 1.5, 4);
  const TrainingData data{{cohort.slice(0, 10)}, {cohort.slice(10, 16)}};
  const auto enc = test::micro_encoder();
  TrainConfig cfg = quick_config(6);
  const TrainResult teacher = train_supervised("a", data, enc, cfg);
  const std::string before = checkpoint_hash(teacher.state);

  const TrainResult student = train_distilled("b", teacher.state, data, enc, cfg);
  EXPECT_EQ(checkpoint_hash(teacher.state), before);
  EXPECT_EQ(student.log.mode, "distilled");
  for (const auto& e : student.log.epochs) {
    EXPECT_NEAR(e.train_loss, cfg.alpha * e.train_cls + cfg.beta * e.train_kd, 1e-7);
  }

  EncoderState thawed = teacher.state;
  thawed.trainable = true;
  EXPECT_EQ(kind_of([&] { train_distilled("b", thawed, data, enc, cfg); }), ErrorKind::kTeacherNotFrozen);
  EXPECT_EQ(kind_of([&] { train_distilled("a", teacher.state, data, enc, cfg); }), ErrorKind::kInvalidArgument);

  // Pure classification weights reduce distillation to supervised training.
  cfg.alpha = 1.0;
  cfg.beta = 0.0;
  const TrainResult plain = train_supervised("b", data, enc, cfg);
  const TrainResult reduced = train_distilled("b", teacher.state, data, enc, cfg);
  ASSERT_EQ(plain.log.epochs.size(), reduced.log.epochs.size());
  for (std::size_t i = 0; i < plain.log.epochs.size(); ++i) {
    EXPECT_DOUBLE_EQ(plain.log.epochs[i].train_loss, reduced.log.epochs[i].train_loss);
    EXPECT_DOUBLE_EQ(plain.log.epochs[i].val_loss, reduced.log.epochs[i].val_loss);
  }
  EXPECT_EQ(plain.state.encoder_params, reduced.state.encoder_params);
}

TEST(Training, SelectTeacher) {
  const std::vector<std::string> diffuse = {"lung", "mediastinal", "hrct", "zero", "bone"};
  const std::map<std::string, double> copd = {
      {"lung", 0.7835}, {"mediastinal", 0.8960}, {"zero", 0.7467}, {"hrct", 0.7739}, {"bone", 0.8111}};
  const auto sel = select_teacher(copd, diffuse);
  EXPECT_EQ(sel.teacher, "mediastinal");
  EXPECT_EQ(sel.students, (std::vector<std::string>{"lung", "hrct", "zero", "bone"}));

  const std::vector<std::string> focal = {"lung", "mediastinal", "hrct", "zero", "pe"};
  const std::map<std::string, double> pe = {
      {"pe", 0.8819}, {"zero", 0.8310}, {"mediastinal", 0.8173}, {"hrct", 0.7953}, {"lung", 0.7952}};
  EXPECT_EQ(select_teacher(pe, focal).teacher, "pe");

  EXPECT_EQ(select_teacher({{"lung", 0.8}, {"mediastinal", 0.8}}, diffuse).teacher, "lung");
  EXPECT_EQ(select_teacher({{"hrct", 0.8}, {"mediastinal", 0.8}, {"bone", 0.1}}, diffuse).teacher, "mediastinal");

  // Strictly increasing transforms leave the argmax alone.
  std::map<std::string, double> warped;
  for (const auto& [k, v] : copd) warped[k] = std::exp(5 * v) - 3;
  EXPECT_EQ(select_teacher(warped, diffuse).teacher, "mediastinal");

  EXPECT_EQ(kind_of([&] { select_teacher({}, diffuse); }), ErrorKind::kEmptyMetrics);
  EXPECT_EQ(kind_of([&] { select_teacher({{"lung", 0.5}}, diffuse); }), ErrorKind::kInvalidArgument);
  EXPECT_EQ(kind_of([&] { select_teacher({{"lung", 0.5}, {"hrct", NAN}}, diffuse); }),
            ErrorKind::kInvalidArgument);
  EXPECT_EQ(kind_of([&] { select_teacher({{"lung", 0.5}, {"pe", 0.6}}, diffuse); }),
            ErrorKind::kWindowSetMismatch);
}

TEST(Training, LogJsonl) {
  test::TempDir dir;
  TrainingLog log;
  log.window = "a";
  log.mode = "supervised";
  log.epochs.push_back({1, 1e-3, 0.7, 0.7, 0.0, 0.69, std::nan(""), 0.1});
  log.epochs.push_back({2, 9e-4, 0.6, 0.6, 0.0, 0.65, 0.75, 0.1});
  log.write_jsonl(dir / "log.jsonl");
  std::ifstream in(dir / "log.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch"), n + 1);
    if (n == 0) EXPECT_TRUE(j.at("val_auc").is_null());
    ++n;
  }
  EXPECT_EQ(n, 2u);
}
