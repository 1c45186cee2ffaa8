#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_util.hpp"
#include "xwd/error.hpp"
#include "xwd/model.hpp"
#include "xwd/training.hpp"

using namespace xwd;

namespace {

std::size_t offset_of(const Encoder& e, const std::string& name) {
  for (const auto& p : e.parameters()) {
    if (p.name == name) return p.offset;
  }
  throw std::runtime_error("no parameter " + name);
}

std::size_t size_of(const Encoder& e, const std::string& name) {
  for (const auto& p : e.parameters()) {
    if (p.name == name) return p.size;
  }
  throw std::runtime_error("no parameter " + name);
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace

TEST(Model, DeterministicBuildAndShape) {
  const auto cfg = EncoderConfig::tiny();
  const auto a = build_encoder(cfg, 3, "lung");
  const auto b = build_encoder(cfg, 3, "lung");
  EXPECT_EQ(a.encoder_params, b.encoder_params);
  EXPECT_EQ(a.head_params, b.head_params);
  EXPECT_NE(a.encoder_params, build_encoder(cfg, 4, "lung").encoder_params);
  const auto x = test::random_volume(8, 64, 64, 1);
  const auto h = forward_features(a, x);
  EXPECT_EQ(h.size(), 64u);
  EXPECT_EQ(h, forward_features(a, x));
  for (double v : h) EXPECT_TRUE(std::isfinite(v));
  EXPECT_THROW(forward_features(a, test::random_volume(8, 32, 64, 1)), Error);
}

TEST(Model, InitializationStatistics) {
  const Encoder enc(EncoderConfig::tiny());
  const auto theta = enc.initialize(17);
  for (const auto& p : enc.parameters()) {
    if (p.is_bias) {
      for (std::size_t i = 0; i < p.size; ++i) EXPECT_EQ(theta[p.offset + i], 0.0);
    } else if (p.size > 2000) {
      double ss = 0;
      for (std::size_t i = 0; i < p.size; ++i) ss += theta[p.offset + i] * theta[p.offset + i];
      EXPECT_NEAR(std::sqrt(ss / p.size), std::sqrt(2.0 / p.fan_in), 0.1 * std::sqrt(2.0 / p.fan_in)) << p.name;
    }
  }
}

TEST(Model, ResNet50PresetShape) {
  const auto cfg = EncoderConfig::se_resnet50({8, 32, 32});
  EXPECT_EQ(cfg.feature_dim, 2048u);
  EXPECT_EQ(cfg.blocks_per_stage, (std::vector<std::size_t>{3, 4, 6, 3}));
  EXPECT_EQ(cfg.se_reduction, 16u);
  const Encoder enc(cfg);
  EXPECT_GT(enc.parameter_count(), 40'000'000u);
}

TEST(Model, BatchRowsAndZeroInput) {
  const auto s = build_encoder(test::micro_encoder(), 5);
  const auto x = test::random_volume(4, 8, 8, 2);
  const std::vector<Tensor> batch = {x, x};
  const auto rows = forward_features(s, batch);
  EXPECT_EQ(rows[0], rows[1]);
  for (double v : forward_features(s, Tensor::volume(4, 8, 8))) EXPECT_GE(v, 0.0);
}

TEST(Model, SeGateHalvesFeatures) {
  const auto cfg = test::micro_encoder();
  const Encoder enc(cfg);
  EncoderState s = build_encoder(cfg, 8);
  // Last block: drop the shortcut so the output is ReLU(gate * main).
  for (const char* n : {"stage1.block0.shortcut.weight", "stage1.block0.shortcut.bias"}) {
    std::fill_n(s.encoder_params.begin() + offset_of(enc, n), size_of(enc, n), 0.0);
  }
  const std::size_t w2 = offset_of(enc, "stage1.block0.se.fc2.weight");
  const std::size_t b2 = offset_of(enc, "stage1.block0.se.fc2.bias");
  std::fill_n(s.encoder_params.begin() + w2, size_of(enc, "stage1.block0.se.fc2.weight"), 0.0);
  EncoderState open = s;
  std::fill_n(open.encoder_params.begin() + b2, cfg.stage_channels[1], 60.0);  // gate = 1 to machine precision
  const auto x = test::random_volume(4, 8, 8, 3);
  const auto half = forward_features(s, x);
  const auto full = forward_features(open, x);
  double total = 0;
  for (std::size_t i = 0; i < half.size(); ++i) {
    EXPECT_NEAR(half[i], 0.5 * full[i], 1e-12);
    total += full[i];
  }
  EXPECT_GT(total, 0.0);
}

TEST(Model, Logits) {
  const std::vector<double> h = {1, 0, 0};
  EXPECT_DOUBLE_EQ(forward_logit(std::vector<double>{0, 0, 0, 0}, h).probability(), 0.5);
  const Logit z = forward_logit(std::vector<double>{2, 0, 0, -2}, h);
  EXPECT_DOUBLE_EQ(z.z, 0.0);
  EXPECT_DOUBLE_EQ(z.probability(), 0.5);
  const double p = Logit{20.0}.probability();
  EXPECT_LT(p, 1.0);
  EXPECT_NEAR(p, 1.0, 1e-8);
  EXPECT_THROW(forward_logit(std::vector<double>{1, 1}, h), Error);
}

TEST(Model, CheckpointRoundTrip) {
  test::TempDir dir;
  EncoderState s = build_encoder(EncoderConfig::tiny(), 2, "mediastinal");
  s.trainable = false;
  s.norm_stats = NormStats{"mediastinal", 0.25, 0.125, 1e-8};
  save_checkpoint(s, dir / "m.xwck");
  const EncoderState r = load_checkpoint(dir / "m.xwck");
  EXPECT_EQ(r.encoder_params, s.encoder_params);
  EXPECT_EQ(r.head_params, s.head_params);
  EXPECT_EQ(r.window_name, "mediastinal");
  EXPECT_FALSE(r.trainable);
  ASSERT_TRUE(r.norm_stats.has_value());
  EXPECT_EQ(r.norm_stats->mean, 0.25);
  const auto x = test::random_volume(8, 64, 64, 4);
  EXPECT_EQ(forward_features(r, x), forward_features(s, x));
  EXPECT_EQ(checkpoint_hash(r), checkpoint_hash(s));

  auto expect_kind = [](ErrorKind kind, auto&& fn) {
    try {
      fn();
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), kind) << e.what();
    }
  };
  {
    const auto bytes = serialize_checkpoint(s);
    std::ofstream out(dir / "t.xwck", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() / 2));
  }
  expect_kind(ErrorKind::kCorruptCheckpoint, [&] { load_checkpoint(dir / "t.xwck"); });
  {
    auto bytes = serialize_checkpoint(s);
    bytes[0] = 'Y';
    std::ofstream out(dir / "m2.xwck", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  expect_kind(ErrorKind::kCorruptCheckpoint, [&] { load_checkpoint(dir / "m2.xwck"); });

  EncoderConfig wide = EncoderConfig::tiny();
  wide.stage_channels.back() = 128;
  wide.feature_dim = 128;
  expect_kind(ErrorKind::kDimensionMismatch, [&] { load_checkpoint(dir / "m.xwck", wide); });
}

TEST(Model, GradientMatchesFiniteDifferences) {
  const auto cfg = test::micro_encoder();
  const Encoder enc(cfg);
  ASSERT_LE(enc.parameter_count() + cfg.feature_dim + 1, 10000u);
  const EncoderState s = build_encoder(cfg, 21);
  const auto x = test::random_volume(4, 8, 8, 22);
  const std::vector<double> teacher = {0.3, -0.2, 1.1, 0.05};
  TrainConfig tc;

  for (const std::vector<double>* t : {static_cast<const std::vector<double>*>(nullptr), &teacher}) {
    std::vector<double> g_theta(enc.parameter_count(), 0.0), g_head(cfg.feature_dim + 1, 0.0);
    Tape tape;
    accumulate_gradients(enc, s.encoder_params, s.head_params, x, 1, t, tc, 1.0, g_theta, g_head, tape);

    auto loss = [&](const std::vector<double>& theta, const std::vector<double>& head) {
      const auto h = enc.forward(theta, x, nullptr);
      const Logit z = forward_logit(head, h);
      return t ? distill_loss(h, *t, z, 1, tc).total : bce_with_logit(z.z, 1);
    };
    const double eps = 1e-6;
    std::vector<double> fd(g_theta.size());
    auto theta = s.encoder_params;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double keep = theta[i];
      theta[i] = keep + eps;
      const double up = loss(theta, s.head_params);
      theta[i] = keep - eps;
      const double down = loss(theta, s.head_params);
      theta[i] = keep;
      fd[i] = (up - down) / (2 * eps);
    }
    EXPECT_LT(relative_error(g_theta, fd), 1e-3) << (t ? "distillation" : "bce");
    std::vector<double> fd_head(g_head.size());
    auto head = s.head_params;
    for (std::size_t i = 0; i < head.size(); ++i) {
      const double keep = head[i];
      head[i] = keep + eps;
      const double up = loss(s.encoder_params, head);
      head[i] = keep - eps;
      const double down = loss(s.encoder_params, head);
      head[i] = keep;
      fd_head[i] = (up - down) / (2 * eps);
    }
    EXPECT_LT(relative_error(g_head, fd_head), 1e-6);
  }
}
