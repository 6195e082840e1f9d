#include <benchmark/benchmark.h>

#include "gblm/calib_stats.hpp"
#include "gblm/mask_builder.hpp"
#include "gblm/metric_engine.hpp"
#include "gblm/obs_kernel.hpp"
#include "gblm/tensor_store.hpp"
#include "gblm/toy_lm.hpp"
#include "gblm/verify.hpp"

namespace {

using namespace gblm;

MatrixD random_matrix(std::uint64_t seed, Index rows, Index cols) {
  SplitMix64 rng(seed);
  MatrixD m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = rng.normal();
  return m;
}

void BM_BuildMaskOutput1(benchmark::State& state) {
  const auto n = static_cast<Index>(state.range(0));
  const MatrixD s = random_matrix(1, n, n);
  for (auto _ : state) {
    benchmark::DoNotOptimize(build_mask(s, GroupSpec::output_1(), SparsitySpec::unstructured(0.5)));
  }
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_BuildMaskOutput1)->Arg(256)->Arg(1024);

void BM_BuildMaskTwoFour(benchmark::State& state) {
  const auto n = static_cast<Index>(state.range(0));
  const MatrixD s = random_matrix(2, n, n);
  for (auto _ : state) {
    benchmark::DoNotOptimize(build_mask(s, GroupSpec::output_1(), SparsitySpec::n_of_m(2, 4)));
  }
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_BuildMaskTwoFour)->Arg(256)->Arg(1024);

void BM_ScoreGblmL1(benchmark::State& state) {
  const auto n = static_cast<Index>(state.range(0));
  LayerStats st(n, n);
  for (int k = 0; k < 4; ++k) st.accumulate_gradient(random_matrix(10 + k, n, n));
  st.accumulate_activations(random_matrix(20, 2 * n, n));
  const MatrixD w = random_matrix(3, n, n);
  const auto spec = builtin_metric("gblm-l1", 100.0);
  for (auto _ : state) benchmark::DoNotOptimize(score(spec, w, st));
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_ScoreGblmL1)->Arg(256)->Arg(1024);

void BM_AccumulateGradient(benchmark::State& state) {
  const auto n = static_cast<Index>(state.range(0));
  LayerStats st(n, n);
  const MatrixD g = random_matrix(4, n, n);
  for (auto _ : state) st.accumulate_gradient(g);
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_AccumulateGradient)->Arg(256)->Arg(1024);

Container sample_container(Index n) {
  Container c;
  for (int k = 0; k < 4; ++k) {
    c.add(TensorRecord::from_matrix("layers." + std::to_string(k) + ".proj.weight", random_matrix(5 + k, n, n)));
  }
  return c;
}

void BM_ContainerEncode(benchmark::State& state) {
  const auto c = sample_container(static_cast<Index>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(encode_container(c));
}
BENCHMARK(BM_ContainerEncode)->Arg(256);

void BM_ContainerDecode(benchmark::State& state) {
  const auto bytes = encode_container(sample_container(static_cast<Index>(state.range(0))));
  for (auto _ : state) benchmark::DoNotOptimize(decode_container(bytes));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(bytes.size()));
}
BENCHMARK(BM_ContainerDecode)->Arg(256);

void BM_ObsDeltaEFull(benchmark::State& state) {
  const auto q = random_quad_model(7, static_cast<Index>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(obs_delta_e_full(q, 0));
}
BENCHMARK(BM_ObsDeltaEFull)->Arg(16)->Arg(128);

}  // namespace

BENCHMARK_MAIN();
