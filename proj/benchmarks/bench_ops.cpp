#include <benchmark/benchmark.h>

#include "prunelab/am.hpp"
#include "prunelab/model.hpp"
#include "prunelab/ops.hpp"
#include "prunelab/random.hpp"

using namespace prunelab;

namespace {

Tensor noise(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = rng.uniform(-1.0f, 1.0f);
  return t;
}

// Args: batch, in channels, out channels, spatial extent.
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({64, 3, 32, 32})->Args({64, 32, 32, 32})->Args({64, 64, 64, 16})->Args({64, 128, 128, 8});
}

void BM_ConvForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1));
  const auto o = static_cast<std::size_t>(state.range(2)), hw = static_cast<std::size_t>(state.range(3));
  const Tensor x = noise({n, c, hw, hw}, 1), w = noise({o, c, 3, 3}, 2), b = noise({o}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d_forward(x, w, b, {1, 1}));
  state.counters["GMAC/s"] = benchmark::Counter(static_cast<double>(n * o * c * 9 * hw * hw) * 1e-9,
                                               benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_ConvForward)->Apply(conv_args)->Unit(benchmark::kMillisecond);

void BM_ConvBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1));
  const auto o = static_cast<std::size_t>(state.range(2)), hw = static_cast<std::size_t>(state.range(3));
  const Tensor x = noise({n, c, hw, hw}, 1), w = noise({o, c, 3, 3}, 2), g = noise({n, o, hw, hw}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d_backward(x, w, {1, 1}, g));
  state.counters["GMAC/s"] = benchmark::Counter(2.0 * static_cast<double>(n * o * c * 9 * hw * hw) * 1e-9,
                                               benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_ConvBackward)->Apply(conv_args)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  nn::Model model = nn::build_model(nn::architecture("vgg-mini"), {}, 1);
  const Tensor x = noise(nn::InputShape{}.batch(batch), 5);
  std::vector<int> labels(batch);
  for (std::size_t i = 0; i < batch; ++i) labels[i] = static_cast<int>(i % 10);
  for (auto _ : state) {
    const auto trace = nn::forward_trace(model, x);
    const auto loss = ops::softmax_xent(trace.output(), labels);
    const auto grads = nn::backward(model, trace, loss.grad_logits);
    nn::sgd_step(model, grads, 1e-4f, 0.9f);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * batch));
}
BENCHMARK(BM_TrainStep)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_EvaluateForward(benchmark::State& state) {
  const nn::Model model = nn::build_model(nn::architecture("vgg-mini"), {}, 1);
  const Tensor x = noise(nn::InputShape{}.batch(250), 6);
  for (auto _ : state) benchmark::DoNotOptimize(nn::forward(model, x));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 250));
}
BENCHMARK(BM_EvaluateForward)->Unit(benchmark::kMillisecond);

void BM_ActivationMaximize(benchmark::State& state) {
  const nn::Model model = nn::build_model(nn::architecture("vgg-mini"), {}, 1);
  const am::AmConfig config{.eta = 0.1, .iterations = 16, .seed = 7, .init_scale = 0.1f, .normalize_grad = true};
  const auto layer = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(am::activation_maximize(model, layer, 0, config));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * config.iterations));
}
BENCHMARK(BM_ActivationMaximize)->Arg(10)->Arg(12)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
