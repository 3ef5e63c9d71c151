// Serial reference vs OpenMP retrieval scoring, plus the two loss kernels.

#include <benchmark/benchmark.h>

#include "soundprobe/kernels.hpp"
#include "soundprobe/probe.hpp"
#include "soundprobe/random.hpp"

using namespace soundprobe;

namespace {

Eigen::MatrixXd gaussian(std::uint64_t seed, Eigen::Index rows, Eigen::Index cols) {
  Rng rng = make_rng(seed, "bench");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = standard_normal(rng);
  return m;
}

// 144 candidates (the retrieval registry size), state.range(0) queries.
void BM_TopkSerial(benchmark::State& state) {
  const Eigen::MatrixXd cand = gaussian(1, 128, 144);
  const Eigen::MatrixXd q = gaussian(2, 128, state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::topk_serial(cand, q, 3));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_TopkParallel(benchmark::State& state) {
  const Eigen::MatrixXd cand = gaussian(1, 128, 144);
  const Eigen::MatrixXd q = gaussian(2, 128, state.range(0));
  const int threads = static_cast<int>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::topk_parallel(cand, q, 3, kernels::Scoring::cosine, threads));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_Loss(benchmark::State& state, LossKernel kernel) {
  TrainConfig cfg;
  const ProbeParams p = init_params(cfg, 64, 48);
  ContrastiveBatch batch{gaussian(3, 64, 32), gaussian(4, 48, 32), gaussian(5, 48, 32 * 64), 64};
  const LossOptions opts{false, kernel};
  for (auto _ : state) benchmark::DoNotOptimize(loss_gradients(p, batch, opts));
}

}  // namespace

BENCHMARK(BM_TopkSerial)->Arg(900)->Arg(4500);
BENCHMARK(BM_TopkParallel)->Args({900, 1})->Args({900, 2})->Args({900, 4})->Args({4500, 1})->Args({4500, 4})->UseRealTime();
BENCHMARK_CAPTURE(BM_Loss, explicit_projection, LossKernel::explicit_projection);
BENCHMARK_CAPTURE(BM_Loss, gram, LossKernel::gram);

BENCHMARK_MAIN();
