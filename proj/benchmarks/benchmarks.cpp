#include <benchmark/benchmark.h>

#include <random>

#include "xwd/analysis.hpp"
#include "xwd/model.hpp"
#include "xwd/random.hpp"
#include "xwd/training.hpp"
#include "xwd/windowing.hpp"

using namespace xwd;

namespace {

Tensor noise(std::size_t d, std::size_t h, std::size_t w, double scale) {
  Tensor t = Tensor::volume(d, h, w);
  Rng rng(1);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

void BM_ApplyWindow(benchmark::State& state) {
  const Tensor hu = noise(8, 64, 64, 500.0);
  const WindowSpec lung{"lung", 1500, -600};
  for (auto _ : state) benchmark::DoNotOptimize(apply_window(hu, lung));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(hu.data().size()));
}
BENCHMARK(BM_ApplyWindow);

void BM_EncoderForward(benchmark::State& state) {
  const auto size = static_cast<std::size_t>(state.range(0));
  const EncoderState s = build_encoder(EncoderConfig::tiny({8, size, size}), 1);
  const Tensor x = noise(8, size, size, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(forward_features(s, x));
}
BENCHMARK(BM_EncoderForward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_EncoderForwardBackward(benchmark::State& state) {
  const auto size = static_cast<std::size_t>(state.range(0));
  const EncoderConfig cfg = EncoderConfig::tiny({8, size, size});
  const Encoder enc(cfg);
  const EncoderState s = build_encoder(cfg, 1);
  const Tensor x = noise(8, size, size, 1.0);
  std::vector<double> g(enc.parameter_count()), gh(cfg.feature_dim + 1);
  const TrainConfig tc;
  Tape tape;
  for (auto _ : state) {
    accumulate_gradients(enc, s.encoder_params, s.head_params, x, 1, nullptr, tc, 1.0, g, gh, tape);
  }
}
BENCHMARK(BM_EncoderForwardBackward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Auc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> s(n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = u(rng);
    y[i] = static_cast<int>(i % 2);
  }
  for (auto _ : state) benchmark::DoNotOptimize(compute_auc(s, y));
}
BENCHMARK(BM_Auc)->Arg(100)->Arg(10000);

void BM_BootstrapAuc(benchmark::State& state) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> s(100);
  std::vector<int> y(100);
  for (std::size_t i = 0; i < 100; ++i) {
    y[i] = static_cast<int>(i % 2);
    s[i] = 0.3 * y[i] + u(rng);
  }
  for (auto _ : state) benchmark::DoNotOptimize(bootstrap_ci(s, y, Metric::kAuc, 1000, 4));
}
BENCHMARK(BM_BootstrapAuc)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
