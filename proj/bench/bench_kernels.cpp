// Serial reference kernels against their OpenMP versions.
#include <random>

#include <benchmark/benchmark.h>

#include "psmt/fisher.hpp"
#include "psmt/kernels.hpp"
#include "psmt/network.hpp"

using namespace psmt;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Matrix m(r, c);
  for (double& v : m.data()) v = n(rng);
  return m;
}

Exec exec_of(const benchmark::State& state) { return state.range(1) ? Exec::parallel : Exec::serial; }

void BM_Affine(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix x = random_matrix(200, n, 1), w = random_matrix(n, n, 2);
  Matrix out(200, n);
  for (auto _ : state) {
    kernels::affine(x, w.data(), {}, n, out, exec_of(state));
    benchmark::DoNotOptimize(out.data().data());
  }
}

void BM_WeightGrad(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix x = random_matrix(200, n, 3), dz = random_matrix(200, n, 4);
  Matrix gw(n, n);
  for (auto _ : state) {
    kernels::weight_grad(dz, x, gw.data(), exec_of(state));
    benchmark::DoNotOptimize(gw.data().data());
  }
}

void BM_FisherDiag(benchmark::State& state) {
  NetworkSpec spec;
  spec.input_dim = 8;
  spec.hidden_dims = {static_cast<std::size_t>(state.range(0))};
  spec.num_classes = 3;
  spec.normalization = {Normalization::batch_stat};
  const Model m = init_network(spec, 1);
  Batch batch{random_matrix(200, 8, 5), std::nullopt, "bench"};
  for (auto _ : state) {
    FisherDiag f = estimate_fisher_diag(spec, m.params, m.stats, batch, ForwardMode::train_stats,
                                        LabelRule::argmax_pseudo, exec_of(state));
    benchmark::DoNotOptimize(f.values.values().data());
  }
}

}  // namespace

BENCHMARK(BM_Affine)->ArgsProduct({{32, 128, 512}, {0, 1}})->ArgNames({"n", "parallel"});
BENCHMARK(BM_WeightGrad)->ArgsProduct({{32, 128, 512}, {0, 1}})->ArgNames({"n", "parallel"});
BENCHMARK(BM_FisherDiag)->ArgsProduct({{32, 128}, {0, 1}})->ArgNames({"hidden", "parallel"});

BENCHMARK_MAIN();
