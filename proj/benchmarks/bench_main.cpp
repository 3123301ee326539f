#include <benchmark/benchmark.h>

#include "btgat/cluster_eval.hpp"
#include "btgat/layers.hpp"
#include "btgat/model.hpp"
#include "btgat/random.hpp"

using namespace btgat;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_Conv2d(benchmark::State& state) {
  const auto hw = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  const Var x(random_tensor({hw, hw, c}, rng));
  const Var w(random_tensor({3, 3, c, 4 * c}, rng));
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w));
}
BENCHMARK(BM_Conv2d)->Args({16, 3})->Args({16, 4})->Args({8, 8})->Args({4, 16});

void BM_Conv2dBackward(benchmark::State& state) {
  const auto hw = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  Rng rng(2);
  const Tensor x = random_tensor({hw, hw, c}, rng);
  const Tensor w = random_tensor({3, 3, c, 4 * c}, rng);
  for (auto _ : state) {
    Tape tape;
    const Var xv = tape.leaf(x), wv = tape.leaf(w);
    benchmark::DoNotOptimize(tape.backward(ops::sum(ops::conv2d(xv, wv))));
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({16, 3})->Args({8, 8});

void BM_ConvLSTMStep(benchmark::State& state) {
  const auto hw = static_cast<std::size_t>(state.range(0));
  const auto ci = static_cast<std::size_t>(state.range(1));
  const auto co = static_cast<std::size_t>(state.range(2));
  Rng rng(3);
  ParameterSet params;
  const auto cell = make_convlstm_cell(params, "cell", ci, co, rng);
  const Binding b(params, nullptr);
  const Var x(random_tensor({hw, hw, ci}, rng));
  const LSTMState s = convlstm_zero_state(cell, hw, hw);
  for (auto _ : state) benchmark::DoNotOptimize(convlstm_step(cell, b, x, s));
}
BENCHMARK(BM_ConvLSTMStep)->Args({16, 3, 4})->Args({8, 4, 8})->Args({4, 8, 16})->Args({2, 16, 32});

void BM_ModelForward(benchmark::State& state) {
  ModelConfig mc;
  mc.n_clusters = 3;
  Rng rng(4);
  const Model model(mc, {16, 16, 3}, 4);
  Tensor window({mc.window_length, 16, 16, 3});
  for (auto& v : window.data()) v = rng.uniform(0.0, 1.0);
  const std::vector<std::uint8_t> mask(mc.window_length, 1);
  const Binding b(model.parameters(), nullptr);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(b, window, mask));
}
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond);

void BM_EvaluateInternal(benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  const Tensor X = random_tensor({T, 768}, rng);
  Labeling l;
  l.k = 4;
  for (std::size_t i = 0; i < T; ++i) l.labels.push_back(i % 4);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_internal(X, l));
}
BENCHMARK(BM_EvaluateInternal)->Arg(120)->Arg(480);

void BM_KMeans(benchmark::State& state) {
  Rng rng(6);
  const Tensor X = random_tensor({240, 768}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(kmeans_cluster(X, static_cast<std::size_t>(state.range(0)), 1));
}
BENCHMARK(BM_KMeans)->Arg(3)->Arg(7);

void BM_HacWard(benchmark::State& state) {
  Rng rng(7);
  const Tensor X = random_tensor({static_cast<std::size_t>(state.range(0)), 768}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(hac_cluster(X, 3));
}
BENCHMARK(BM_HacWard)->Arg(120)->Arg(240);

}  // namespace

BENCHMARK_MAIN();
