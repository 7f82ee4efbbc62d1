// SPDX-License-Identifier: Apache-2.0
//
// Serial reference kernels against their OpenMP counterparts.
#include <benchmark/benchmark.h>

#include <random>

#include "headlrp/attribution.hpp"
#include "headlrp/kernels.hpp"
#include "headlrp/synthetic.hpp"

using namespace headlrp;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

template <Tensor (*Fn)(const Tensor&, const Tensor&)>
void bm_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <Tensor (*Fn)(const Tensor&)>
void bm_softmax(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(a));
}

template <Tensor (*Fn)(const Tensor&, const Tensor&, const Tensor&, double)>
void bm_layer_norm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({n, 256}, 4), g = random_tensor({256}, 5), b = random_tensor({256}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(x, g, b, 1e-12));
}

void bm_explain(benchmark::State& state) {
  const ModelConfig c = synthetic::small_config(4, 4, 32, 64, 50, 3);
  const ModelWeights w = synthetic::random_weights(c, 7);
  std::mt19937_64 rng(8);
  const auto ids = synthetic::random_tokens(c, 16, rng);
  HeadMask mask(4, 4);
  mask.set(1, 2, "synt:nsubj");
  mask.set(3, 0, "pos:+1");
  for (auto _ : state) benchmark::DoNotOptimize(explain(c, w, ids, 0, mask));
}

}  // namespace

BENCHMARK(bm_matmul<serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(bm_matmul<headlrp::matmul>)->Name("matmul/openmp")->Arg(64)->Arg(256);
BENCHMARK(bm_softmax<serial::softmax_rows>)->Name("softmax_rows/serial")->Arg(128)->Arg(512);
BENCHMARK(bm_softmax<headlrp::softmax_rows>)->Name("softmax_rows/openmp")->Arg(128)->Arg(512);
BENCHMARK(bm_layer_norm<serial::layer_norm>)->Name("layer_norm/serial")->Arg(128)->Arg(1024);
BENCHMARK(bm_layer_norm<headlrp::layer_norm>)->Name("layer_norm/openmp")->Arg(128)->Arg(1024);
BENCHMARK(bm_explain)->Name("explain/B4_M4_d32_T16");

BENCHMARK_MAIN();
